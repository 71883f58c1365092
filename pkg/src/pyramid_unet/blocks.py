"""Pyramid-scale aggregation block (PSAB) and its building pieces.

A PSAB splits its input into three parallel branches at x2, x1 and x0.5
resolution, processes each with a small conv stack, brings the results back
to the input resolution, concatenates them, gates the concatenation with
channel attention and adds the block input back.

Re-scaling conventions used throughout:
    * x2 upsampling: bilinear interpolation, ``align_corners=False``.
    * x2 downsampling: 2x2 average pooling.
"""
from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class BlockConfigError(ValueError):
    """Raised when a block is constructed with an unsupported channel layout."""


class PyramidBranches(NamedTuple):
    higher: torch.Tensor
    current: torch.Tensor
    lower: torch.Tensor


class ScaledInputTriple(NamedTuple):
    """The colour image resized to the three branch resolutions of one block."""

    higher: torch.Tensor
    current: torch.Tensor
    lower: torch.Tensor


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def downsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, kernel_size=2, stride=2)


def _check_4d(x: torch.Tensor, name: str = "input") -> None:
    if x.dim() != 4:
        raise ValueError(f"{name} must be a 4D (N, C, H, W) tensor, got shape {tuple(x.shape)}")


class ChannelAttention(nn.Module):
    """Channel gate from global average- and max-pooled descriptors.

    ``gate = sigmoid(W(avgpool(x)) + W(maxpool(x)))`` with ``W`` a shared
    linear 1x1 bottleneck (C -> max(C // reduction, 1) -> C). The output is
    ``gate * x`` broadcast over the spatial axes.

    No ReLU sits inside the bottleneck: the pooled descriptors are
    non-negative, so a one-unit ReLU bottleneck (small C) can die at
    initialisation and never receive gradient.
    """

    def __init__(self, channels: int, reduction: int = 16, bias: bool = False):
        super().__init__()
        if channels < 2:
            raise BlockConfigError(f"channel attention needs at least 2 channels, got {channels}")
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, kernel_size=1, bias=bias),
            nn.Conv2d(hidden, channels, kernel_size=1, bias=bias),
        )

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        _check_4d(x)
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.gate(x) * x


class BranchSplit(nn.Module):
    """Channel adjustment into the higher / current / lower branches.

    current: 1x1 conv to C/2 at HxW.
    higher:  x2 bilinear upsample, then 1x1 conv to C/4.
    lower:   2x2 average pool, then 1x1 conv to C/4.
    """

    def __init__(self, channels: int, bias: bool = True):
        super().__init__()
        if channels % 4 != 0:
            raise BlockConfigError(f"PSAB channels must be divisible by 4, got {channels}")
        self.channels = channels
        self.to_higher = nn.Conv2d(channels, channels // 4, kernel_size=1, bias=bias)
        self.to_current = nn.Conv2d(channels, channels // 2, kernel_size=1, bias=bias)
        self.to_lower = nn.Conv2d(channels, channels // 4, kernel_size=1, bias=bias)

    def forward(self, x: torch.Tensor) -> PyramidBranches:
        _check_4d(x)
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"spatial size must be even to form the lower branch, got {h}x{w}")
        return PyramidBranches(
            higher=self.to_higher(upsample2x(x)),
            current=self.to_current(x),
            lower=self.to_lower(downsample2x(x)),
        )


class PyramidInputEnhance(nn.Module):
    """Fuse a resized copy of the input image into one branch.

    The image goes through a 3x3 conv (3 -> max(branch_channels // 2, 2)),
    is concatenated to the branch features and a 1x1 conv restores the
    branch channel count.
    """

    def __init__(self, branch_channels: int, image_channels: int = 3):
        super().__init__()
        image_features = max(branch_channels // 2, 2)
        self.image_conv = nn.Conv2d(image_channels, image_features, kernel_size=3, padding=1)
        self.fuse = nn.Conv2d(branch_channels + image_features, branch_channels, kernel_size=1)

    def forward(self, branch: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        _check_4d(branch, "branch")
        _check_4d(image, "image")
        if branch.shape[-2:] != image.shape[-2:]:
            raise ValueError(
                f"scaled image is {tuple(image.shape[-2:])} but branch is {tuple(branch.shape[-2:])}; "
                "resize the image before enhancement"
            )
        return self.fuse(torch.cat([branch, self.image_conv(image)], dim=1))


class ConvStack(nn.Sequential):
    """Two (3x3 conv -> batch norm -> ReLU) stages at constant width."""

    def __init__(self, channels: int):
        super().__init__(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )


class SideHead(nn.Module):
    """Dropout -> 3x3 conv to one channel -> sigmoid."""

    def __init__(self, channels: int, dropout: float = 0.5):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.conv = nn.Conv2d(channels, 1, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(self.dropout(x)))


class PSAB(nn.Module):
    """Pyramid-scale aggregation block.

    Args:
        channels: input and output channel count, must be divisible by 4.
        role: ``"encoder"`` blocks take a :class:`ScaledInputTriple` and fuse it
            into each branch; ``"decoder"`` blocks carry one side head per
            branch and return the three probability maps alongside the
            features; ``"plain"`` blocks do neither.
        reduction: channel attention bottleneck ratio.
        attention_after_residual: gate ``concat + x`` instead of ``concat``.
        head_dropout: dropout rate in front of decoder side heads.

    ``forward`` returns the output features for encoder and plain blocks and a
    ``(features, (y_higher, y_current, y_lower))`` pair for decoder blocks.
    """

    ROLES = ("encoder", "decoder", "plain")

    def __init__(
        self,
        channels: int,
        role: str = "plain",
        reduction: int = 16,
        attention_after_residual: bool = False,
        head_dropout: float = 0.5,
    ):
        super().__init__()
        if role not in self.ROLES:
            raise BlockConfigError(f"unknown PSAB role {role!r}; expected one of {self.ROLES}")
        self.channels = channels
        self.role = role
        self.attention_after_residual = attention_after_residual

        self.split = BranchSplit(channels)
        widths = (channels // 4, channels // 2, channels // 4)
        if role == "encoder":
            self.enhance = nn.ModuleList(PyramidInputEnhance(c) for c in widths)
        else:
            self.enhance = None
        self.process = nn.ModuleList(ConvStack(c) for c in widths)
        self.attention = ChannelAttention(channels, reduction)
        if role == "decoder":
            self.heads = nn.ModuleList(SideHead(c, head_dropout) for c in widths)
        else:
            self.heads = None

    def forward(self, x: torch.Tensor, scaled_inputs: Optional[ScaledInputTriple] = None):
        if self.role == "encoder" and scaled_inputs is None:
            raise ValueError("encoder PSAB requires scaled_inputs")
        if self.role != "encoder" and scaled_inputs is not None:
            raise ValueError(f"{self.role} PSAB does not accept scaled_inputs")

        branches = self.split(x)
        if self.enhance is not None:
            branches = PyramidBranches(
                *(enh(b, img) for enh, b, img in zip(self.enhance, branches, scaled_inputs))
            )
        feats = PyramidBranches(*(f(b) for f, b in zip(self.process, branches)))

        merged = torch.cat(
            [downsample2x(feats.higher), feats.current, upsample2x(feats.lower)], dim=1
        )
        if self.attention_after_residual:
            out = self.attention(merged + x)
        else:
            out = self.attention(merged) + x

        if self.heads is None:
            return out
        aux = tuple(head(f) for head, f in zip(self.heads, feats))
        return out, aux

