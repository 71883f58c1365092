"""Segmentation losses and deep pyramid supervision.

The per-map loss is ``ce_weight * bce + iou_weight * soft_iou``. Decoder
side heads at level ``l`` are scored against the ground truth resized to
their own resolutions and summed over all levels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F

BCE_CLAMP = 1e-7
BRANCH_NAMES = ("higher", "current", "lower")


@dataclass(frozen=True)
class LossWeights:
    lambda_aux: float = 0.5
    ce_weight: float = 1.0
    iou_weight: float = 1.0
    epsilon: float = 1e-6
    mask_scale_mode: str = "area"

    def __post_init__(self):
        if self.lambda_aux < 0 or self.ce_weight < 0 or self.iou_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ce_weight == 0 and self.iou_weight == 0:
            raise ValueError("at least one of ce_weight and iou_weight must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.mask_scale_mode not in ("area", "nearest"):
            raise ValueError(f"mask_scale_mode must be 'area' or 'nearest', got {self.mask_scale_mode!r}")


def _check_shapes(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    _check_shapes(pred, target)
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


def iou_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Soft IoU loss ``1 - (sum(p*t) + eps) / (sum(p) + sum(t) - sum(p*t) + eps)``.

    Sums run over every element of the tensor (the whole batch is pooled).
    """
    _check_shapes(pred, target)
    t = target.to(pred.dtype)
    inter = (pred * t).sum()
    union = pred.sum() + t.sum() - inter
    return 1.0 - (inter + eps) / (union + eps)


def map_loss(pred: torch.Tensor, target: torch.Tensor, w: LossWeights) -> torch.Tensor:
    loss = pred.new_zeros(())
    if w.ce_weight:
        loss = loss + w.ce_weight * bce_loss(pred, target)
    if w.iou_weight:
        loss = loss + w.iou_weight * iou_loss(pred, target, w.epsilon)
    return loss


def _power_of_two_exponent(ratio: float) -> int:
    k = round(math.log2(ratio)) if ratio > 0 else None
    if k is None or 2.0 ** k != ratio:
        raise ValueError(f"resize ratio {ratio} is not a power of two")
    return k


def scale_ground_truth(mask: torch.Tensor, target_size: Tuple[int, int], mode: str = "area") -> torch.Tensor:
    """Resize a binary mask by a power of two and re-binarise it.

    Downscaling averages each 2**k x 2**k cell and keeps cells whose mean is
    at least 0.5 (``mode="area"``) or subsamples (``mode="nearest"``).
    Upscaling replicates pixels. Accepts ``H x W``, ``C x H x W`` or
    ``N x C x H x W`` tensors and returns the same rank.
    """
    if mask.dim() < 2:
        raise ValueError("mask must have at least 2 dimensions")
    h, w = mask.shape[-2:]
    th, tw = int(target_size[0]), int(target_size[1])
    kh = _power_of_two_exponent(th / h)
    kw = _power_of_two_exponent(tw / w)
    if kh != kw:
        raise ValueError(f"anisotropic resize {h}x{w} -> {th}x{tw} is not supported")
    if kh == 0:
        return (mask >= 0.5).to(mask.dtype)

    lead = mask.shape[:-2]
    m = mask.reshape(-1, 1, h, w).float()
    if kh > 0:
        out = F.interpolate(m, size=(th, tw), mode="nearest")
    elif mode == "area":
        out = F.avg_pool2d(m, kernel_size=2 ** -kh)
    elif mode == "nearest":
        out = F.interpolate(m, size=(th, tw), mode="nearest")
    else:
        raise ValueError(f"unknown mask scale mode {mode!r}")
    out = (out >= 0.5).to(mask.dtype)
    return out.reshape(*lead, th, tw)


def build_mask_pyramid(gt: torch.Tensor, aux, mode: str = "area") -> List[Tuple[torch.Tensor, ...]]:
    """Masks matching every side-head map in ``aux``."""
    return [
        tuple(scale_ground_truth(gt, y.shape[-2:], mode) for y in triple)
        for triple in aux
    ]


def deep_pyramid_loss(aux: Sequence, masks: Sequence, w: LossWeights) -> torch.Tensor:
    """Sum over levels of L(Y^p, M_{l-1}) + L(Y, M_l) + L(Y^d, M_{l+1})."""
    if len(aux) != len(masks):
        raise ValueError(f"{len(aux)} aux levels but {len(masks)} mask levels")
    total = None
    for level, (ys, ms) in enumerate(zip(aux, masks)):
        if len(ys) != 3 or len(ms) != 3:
            raise ValueError(f"level {level}: expected (higher, current, lower) triples")
        for name, y, m in zip(BRANCH_NAMES, ys, ms):
            if y.shape != m.shape:
                raise ValueError(
                    f"level {level} {name} branch: prediction {tuple(y.shape)} vs mask {tuple(m.shape)}"
                )
            term = map_loss(y, m, w)
            total = term if total is None else total + term
    if total is None:
        raise ValueError("no auxiliary outputs given")
    return total


def total_loss(outputs, gt: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """L(main, gt) + lambda_aux * deep_pyramid_loss(aux, scaled gt)."""
    main_term = map_loss(outputs.main, gt, w)
    if w.lambda_aux == 0:
        return main_term
    masks = build_mask_pyramid(gt, outputs.aux, w.mask_scale_mode)
    return main_term + w.lambda_aux * deep_pyramid_loss(outputs.aux, masks, w)
