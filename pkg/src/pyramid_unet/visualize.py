"""Error maps and comparison panels.

Colour code: white = true positive, black = true negative,
red = false positive, green = false negative. Pixels outside the FOV are black.
"""
from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image

WHITE = (255, 255, 255)
BLACK = (0, 0, 0)
RED = (255, 0, 0)
GREEN = (0, 255, 0)


def error_map(pred_binary, gt, fov=None) -> np.ndarray:
    pred = np.asarray(pred_binary).astype(bool)
    truth = np.asarray(gt).astype(bool)
    inside = np.ones_like(truth) if fov is None else np.asarray(fov).astype(bool)
    if not (pred.shape == truth.shape == inside.shape):
        raise ValueError(f"misaligned inputs: {pred.shape}, {truth.shape}, {inside.shape}")
    out = np.zeros(pred.shape + (3,), np.uint8)
    out[pred & truth & inside] = WHITE
    out[pred & ~truth & inside] = RED
    out[~pred & truth & inside] = GREEN
    return out


def color_counts(err: np.ndarray, fov=None) -> dict:
    """Count (tp, tn, fp, fn) by colour; black inside the FOV is a true negative."""
    inside = np.ones(err.shape[:2], bool) if fov is None else np.asarray(fov).astype(bool)

    def count(color, where):
        return int(np.count_nonzero(np.all(err == color, axis=-1) & where))

    return {
        "tp": count(WHITE, inside),
        "tn": count(BLACK, inside),
        "fp": count(RED, inside),
        "fn": count(GREEN, inside),
    }


def _to_rgb(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=-1)
    if a.dtype != np.uint8:
        a = (np.clip(a.astype(np.float64), 0, 1) * 255).round().astype(np.uint8)
    return a


def comparison_panel(original, gt, pred_binary, err) -> np.ndarray:
    """Side-by-side (original, ground truth, prediction, error map)."""
    tiles = [_to_rgb(original), _to_rgb(np.asarray(gt).astype(np.uint8) * 255),
             _to_rgb(np.asarray(pred_binary).astype(np.uint8) * 255), _to_rgb(err)]
    shapes = {t.shape for t in tiles}
    if len(shapes) != 1:
        raise ValueError(f"misaligned panel tiles: {sorted(shapes)}")
    gap = np.full((tiles[0].shape[0], 4, 3), 128, np.uint8)
    row = [tiles[0]]
    for t in tiles[1:]:
        row += [gap, t]
    return np.concatenate(row, axis=1)


def visualize(pred_binary, gt, fov, original, out_dir, ident: str) -> Tuple[Path, Path]:
    """Write ``<ident>_err.png`` and ``<ident>_panel.png`` under ``out_dir``."""
    err = error_map(pred_binary, gt, fov)
    panel = comparison_panel(original, gt, pred_binary, err)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    err_path, panel_path = out / f"{ident}_err.png", out / f"{ident}_panel.png"
    Image.fromarray(err).save(err_path)
    Image.fromarray(panel).save(panel_path)
    return err_path, panel_path
