"""Pixel-level vessel segmentation metrics restricted to the field of view."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """A metric's denominator is zero for the given counts."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


def _as_binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    vals = np.unique(a)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name} must be binary (0/1), found values {vals[:5]}")
    return a.astype(bool)


def confusion(pred_binary, gt, fov=None) -> ConfusionCounts:
    pred = _as_binary(pred_binary, "prediction")
    truth = _as_binary(gt, "ground truth")
    inside = np.ones_like(truth) if fov is None else _as_binary(fov, "fov")
    if not (pred.shape == truth.shape == inside.shape):
        raise ValueError(f"shape mismatch: {pred.shape}, {truth.shape}, {inside.shape}")
    p, t = pred[inside], truth[inside]
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


def classification_metrics(c: ConfusionCounts):
    """Return ``(sensitivity, specificity, accuracy)``."""
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("sensitivity undefined: no positive pixels (tp + fn = 0)")
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("specificity undefined: no negative pixels (tn + fp = 0)")
    return c.tp / (c.tp + c.fn), c.tn / (c.tn + c.fp), (c.tp + c.tn) / c.total


def auc(scores, gt, fov=None) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    truth = _as_binary(gt, "ground truth")
    inside = np.ones_like(truth) if fov is None else _as_binary(fov, "fov")
    if not (s.shape == truth.shape == inside.shape):
        raise ValueError(f"shape mismatch: {s.shape}, {truth.shape}, {inside.shape}")
    s, t = s[inside], truth[inside]
    n_pos = int(np.count_nonzero(t))
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative pixel")
    ranks = rankdata(s, method="average")
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _row(identifier: str, c: ConfusionCounts, auc_value: float) -> Dict:
    sen, spec, acc = classification_metrics(c)
    return {"id": identifier, "sen": sen, "spec": spec, "acc": acc, "auc": auc_value, **asdict(c)}


def evaluate_dataset(predictions: Sequence, records: Sequence, threshold: float = 0.5) -> Dict:
    """Score probability maps against records.

    Returns ``{"images": [...], "aggregate": {...}}``. The aggregate row holds
    pooled-pixel metrics (confusion counts and AUC over the union of all FOV
    pixels) plus per-image means under ``mean_*`` keys.
    """
    if len(predictions) != len(records):
        raise ValueError(f"{len(predictions)} predictions for {len(records)} records")
    if not records:
        raise ValueError("nothing to evaluate")
    rows: List[Dict] = []
    pooled = ConfusionCounts(0, 0, 0, 0)
    all_scores, all_gt = [], []
    for prob, rec in zip(predictions, records):
        prob = np.asarray(prob, dtype=np.float64)
        fov = np.asarray(rec.fov_mask).astype(bool)
        gt = np.asarray(rec.vessel_mask).astype(bool)
        c = confusion(prob >= threshold, gt, fov)
        rows.append(_row(rec.id, c, auc(prob, gt, fov)))
        pooled = pooled + c
        all_scores.append(prob[fov])
        all_gt.append(gt[fov])
    aggregate = _row("aggregate", pooled, auc(np.concatenate(all_scores), np.concatenate(all_gt)))
    for key in ("sen", "spec", "acc", "auc"):
        aggregate[f"mean_{key}"] = float(np.mean([r[key] for r in rows]))
    aggregate["threshold"] = threshold
    return {"images": rows, "aggregate": aggregate}


def format_report(report: Dict) -> str:
    """Human-readable table of an :func:`evaluate_dataset` report."""
    lines = [f"{'id':<16} {'Sen':>7} {'Spec':>7} {'Acc':>7} {'AUC':>7}"]
    for r in report["images"] + [report["aggregate"]]:
        lines.append(f"{r['id']:<16} {r['sen']:7.4f} {r['spec']:7.4f} {r['acc']:7.4f} {r['auc']:7.4f}")
    agg = report["aggregate"]
    lines.append(
        f"{'per-image mean':<16} {agg['mean_sen']:7.4f} {agg['mean_spec']:7.4f} "
        f"{agg['mean_acc']:7.4f} {agg['mean_auc']:7.4f}"
    )
    return "\n".join(lines)
