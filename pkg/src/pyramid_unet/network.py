"""Pyramid U-Net: a U-shaped encoder/decoder built from PSABs.

Layout for ``depth = D`` and ``base_channels = B`` (stage ``l`` runs at
``input_size / 2**l`` with ``B * 2**l`` channels)::

    stem 3x3 conv (3 -> B)
    encoder l = 0..D-1:  PSAB(encoder, fed the image pyramid) -> skip_l
                         -> 2x2 max-pool -> 3x3 conv doubling channels
    bottleneck:          PSAB(plain) at level D
    decoder l = D-1..0:  bilinear x2 + 1x1 conv halving channels
                         -> concat skip_l -> 1x1 fuse conv -> PSAB(decoder)
    head:                1x1 conv -> sigmoid
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import PSAB, ScaledInputTriple, upsample2x


class NetworkConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    base_channels: int = 64
    input_size: Tuple[int, int] = (448, 448)
    attention_after_residual: bool = False
    attention_reduction: int = 16
    head_dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise NetworkConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 4 or self.base_channels % 4:
            raise NetworkConfigError(
                f"base_channels must be a positive multiple of 4, got {self.base_channels}"
            )
        if len(self.input_size) != 2:
            raise NetworkConfigError(f"input_size must be (H, W), got {self.input_size}")
        factor = 2 ** (self.depth + 1)
        for name, size in zip(("height", "width"), self.input_size):
            if size <= 0 or size % factor:
                raise NetworkConfigError(
                    f"input {name} {size} must be divisible by 2**(depth+1) = {factor}"
                )
        if self.attention_reduction < 1:
            raise NetworkConfigError("attention_reduction must be >= 1")
        if not 0.0 <= self.head_dropout < 1.0:
            raise NetworkConfigError("head_dropout must lie in [0, 1)")

    def stage_channels(self) -> List[int]:
        """Channel widths for levels 0..depth (the last entry is the bottleneck)."""
        return [self.base_channels * 2 ** l for l in range(self.depth + 1)]

    def level_size(self, level: int) -> Tuple[int, int]:
        h, w = self.input_size
        if level >= 0:
            return (h // 2 ** level, w // 2 ** level)
        return (h * 2 ** -level, w * 2 ** -level)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise NetworkConfigError(f"unknown network config fields: {sorted(unknown)}")
        return cls(**d)


class PyramidOutputs(NamedTuple):
    """``main`` is N x 1 x H x W; ``aux[l]`` is the (higher, current, lower)
    side-head triple of the decoder block at level ``l`` (level 0 is full
    resolution)."""

    main: torch.Tensor
    aux: Tuple[Tuple[torch.Tensor, torch.Tensor, torch.Tensor], ...]


def _resize(image: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    return F.interpolate(image, size=size, mode="bilinear", align_corners=False, antialias=True)


def scale_input_pyramid(image: torch.Tensor, depth: int) -> List[ScaledInputTriple]:
    """Resize ``image`` for every encoder stage.

    Stage ``l`` gets the image at ``H/2**(l-1)``, ``H/2**l`` and ``H/2**(l+1)``.
    Stage 0's higher entry is an upsampled copy (2H x 2W). Antialiased
    bilinear resampling is a convex combination of input pixels, so the value
    range of the input is preserved.
    """
    if image.dim() != 4:
        raise ValueError(f"image must be N x C x H x W, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    factor = 2 ** (depth + 1)
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} must be divisible by 2**(depth+1) = {factor}")

    cache: Dict[int, torch.Tensor] = {}

    def at(level: int) -> torch.Tensor:
        if level not in cache:
            if level >= 0:
                size = (h // 2 ** level, w // 2 ** level)
            else:
                size = (h * 2 ** -level, w * 2 ** -level)
            cache[level] = _resize(image, size)
        return cache[level]

    return [ScaledInputTriple(at(l - 1), at(l), at(l + 1)) for l in range(depth)]


def _conv_bn_relu(cin: int, cout: int, kernel_size: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size, padding=kernel_size // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class DecoderStage(nn.Module):
    def __init__(self, cfg: NetworkConfig, channels: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels * 2, channels, kernel_size=1)
        self.fuse = _conv_bn_relu(channels * 2, channels, kernel_size=1)
        self.block = PSAB(
            channels,
            role="decoder",
            reduction=cfg.attention_reduction,
            attention_after_residual=cfg.attention_after_residual,
            head_dropout=cfg.head_dropout,
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor):
        x = self.reduce(upsample2x(x))
        x = self.fuse(torch.cat([x, skip], dim=1))
        return self.block(x)


class PyramidUNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = cfg.stage_channels()

        self.stem = _conv_bn_relu(3, cfg.base_channels)
        self.encoder = nn.ModuleList(
            PSAB(
                c,
                role="encoder",
                reduction=cfg.attention_reduction,
                attention_after_residual=cfg.attention_after_residual,
            )
            for c in widths[:-1]
        )
        self.down = nn.ModuleList(_conv_bn_relu(c, 2 * c) for c in widths[:-1])
        self.bottleneck = PSAB(
            widths[-1],
            role="plain",
            reduction=cfg.attention_reduction,
            attention_after_residual=cfg.attention_after_residual,
        )
        # decoder[l] serves level l
        self.decoder = nn.ModuleList(DecoderStage(cfg, c) for c in widths[:-1])
        self.head = nn.Conv2d(cfg.base_channels, 1, kernel_size=1)

    def forward(self, image: torch.Tensor) -> PyramidOutputs:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected an N x 3 x H x W image, got {tuple(image.shape)}")
        if tuple(image.shape[-2:]) != self.cfg.input_size:
            raise ValueError(
                f"expected spatial size {self.cfg.input_size}, got {tuple(image.shape[-2:])}"
            )
        pyramid = scale_input_pyramid(image, self.cfg.depth)

        x = self.stem(image)
        skips = []
        for block, down, scaled in zip(self.encoder, self.down, pyramid):
            x = block(x, scaled)
            skips.append(x)
            x = down(F.max_pool2d(x, 2))
        x = self.bottleneck(x)

        aux: List = [None] * self.cfg.depth
        for level in reversed(range(self.cfg.depth)):
            x, aux[level] = self.decoder[level](x, skips[level])
        main = torch.sigmoid(self.head(x))
        return PyramidOutputs(main, tuple(aux))

    def load_backbone_weights(self, state_dict: Dict[str, torch.Tensor]) -> List[str]:
        """Copy every shape-compatible entry of ``state_dict`` into the network.

        Hook for initialising from externally pre-trained weights; none are
        shipped. Returns the names that were loaded.
        """
        own = self.state_dict()
        loaded = {k: v for k, v in state_dict.items() if k in own and own[k].shape == v.shape}
        self.load_state_dict(loaded, strict=False)
        return sorted(loaded)


def build_network(cfg: NetworkConfig, seed: Optional[int] = None) -> PyramidUNet:
    """Instantiate a network; with ``seed`` the initial weights are reproducible."""
    if seed is None:
        return PyramidUNet(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PyramidUNet(cfg)
