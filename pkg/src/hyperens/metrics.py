"""Segmentation and probability-quality metrics.

Set-level numbers are "micro" aggregates: confusion counts are summed over
all samples before any ratio is formed, and ROC curves use pooled pixels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .inference import threshold_map

TAU_GRID = tuple(float(t) for t in np.round(np.arange(21) * 0.05, 2))
INTERIOR_TAUS = TAU_GRID[1:-1]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def dice(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom

    @property
    def precision(self) -> float:
        denom = self.tp + self.fp
        return (1.0 if self.fn == 0 else 0.0) if denom == 0 else self.tp / denom

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return (1.0 if self.fp == 0 else 0.0) if denom == 0 else self.tp / denom

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def tnr(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else 1.0

    @property
    def fpr(self) -> float:
        return 1.0 - self.tnr

    @property
    def balanced_accuracy(self) -> float:
        return 0.5 * (self.tpr + self.tnr)


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred, truth = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _sweep_counts(p: np.ndarray, truth: np.ndarray, taus: Sequence[float]) -> list[ConfusionCounts]:
    return [confusion(threshold_map(p, t), truth) for t in taus]


def roc_from_counts(counts: Sequence[ConfusionCounts]) -> list[tuple[float, float]]:
    """(FPR, TPR) per threshold, plus the (0,0) and (1,1) endpoints, sorted by FPR."""
    pts = {(0.0, 0.0), (1.0, 1.0)}
    pts.update((c.fpr, c.tpr) for c in counts)
    return sorted(pts)


def trapezoid_auc(points: Sequence[tuple[float, float]]) -> float:
    xs, ys = np.array(points).T
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def roc_curve(p: np.ndarray, truth: np.ndarray, taus: Sequence[float] = TAU_GRID) -> tuple[list[tuple[float, float]], float | None]:
    """Grid ROC points and trapezoid AUC; AUC is ``None`` when truth is all one class."""
    truth = np.asarray(truth).astype(bool)
    counts = _sweep_counts(p, truth, taus)
    pts = roc_from_counts(counts)
    if truth.all() or not truth.any():
        return pts, None
    return pts, trapezoid_auc(pts)


def exact_auc(p: np.ndarray, truth: np.ndarray) -> float | None:
    """Rank (Mann-Whitney) AUC with average ranks for ties."""
    p, truth = np.ravel(p), np.ravel(truth).astype(bool)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(p)
    return float((ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def dice_threshold_sweep(p: np.ndarray, truth: np.ndarray, taus: Sequence[float] = TAU_GRID) -> list[tuple[float, float]]:
    return [(float(t), c.dice) for t, c in zip(taus, _sweep_counts(p, truth, taus))]


def sweep_range(sweep: Sequence[tuple[float, float]], lo: float = 0.05, hi: float = 0.95) -> float:
    vals = [d for t, d in sweep if lo - 1e-12 <= t <= hi + 1e-12]
    return max(vals) - min(vals) if vals else 0.0


def probability_quality(p: np.ndarray, p_true: np.ndarray) -> tuple[float, float, float]:
    """(mean abs error, Brier score, fraction of pixels with 0.1 < p < 0.9)."""
    p, p_true = np.asarray(p, dtype=np.float64), np.asarray(p_true, dtype=np.float64)
    if p.shape != p_true.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {p_true.shape}")
    diff = p - p_true
    return float(np.abs(diff).mean()), float((diff * diff).mean()), float(((p > 0.1) & (p < 0.9)).mean())


@dataclass
class MetricsReport:
    dice: float
    balanced_accuracy: float
    precision: float
    recall: float
    roc_auc: float | None
    roc_auc_exact: float | None
    dice_vs_threshold: list[tuple[float, float]] = field(default_factory=list)
    dice_range: float = 0.0
    roc_points: list[tuple[float, float]] = field(default_factory=list)
    prob_mae: float | None = None
    brier: float | None = None
    polarization_fraction: float | None = None
    n_samples: int = 1

    def summary(self) -> dict:
        d = asdict(self)
        for k in ("dice_vs_threshold", "roc_points"):
            d.pop(k)
        return d


def aggregate(
    items: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray | None]],
    taus: Sequence[float] = TAU_GRID,
    threshold: float = 0.5,
) -> MetricsReport:
    """Micro-aggregate ``(probability, truth, p_true or None)`` triples."""
    items = list(items)
    if not items:
        raise ValueError("nothing to aggregate")
    at_tau = ConfusionCounts(0, 0, 0, 0)
    sweep = [ConfusionCounts(0, 0, 0, 0) for _ in taus]
    abs_err = sq_err = mid = 0.0
    n_pix = 0
    have_truth_prob = all(pt is not None for _, _, pt in items)
    for p, truth, pt in items:
        p = np.asarray(p, dtype=np.float64)
        truth = np.asarray(truth).astype(bool)
        if p.shape != truth.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {truth.shape}")
        at_tau = at_tau + confusion(threshold_map(p, threshold), truth)
        sweep = [a + b for a, b in zip(sweep, _sweep_counts(p, truth, taus))]
        if have_truth_prob:
            mae, brier, pol = probability_quality(p, pt)
            abs_err += mae * p.size
            sq_err += brier * p.size
            mid += pol * p.size
        n_pix += p.size
    pooled_p = np.concatenate([np.ravel(p) for p, _, _ in items])
    pooled_t = np.concatenate([np.ravel(t).astype(bool) for _, t, _ in items])
    degenerate = pooled_t.all() or not pooled_t.any()
    pts = roc_from_counts(sweep)
    dvt = [(float(t), c.dice) for t, c in zip(taus, sweep)]
    return MetricsReport(
        dice=at_tau.dice,
        balanced_accuracy=at_tau.balanced_accuracy,
        precision=at_tau.precision,
        recall=at_tau.recall,
        roc_auc=None if degenerate else trapezoid_auc(pts),
        roc_auc_exact=exact_auc(pooled_p, pooled_t),
        dice_vs_threshold=dvt,
        dice_range=sweep_range(dvt),
        roc_points=pts,
        prob_mae=abs_err / n_pix if have_truth_prob else None,
        brier=sq_err / n_pix if have_truth_prob else None,
        polarization_fraction=mid / n_pix if have_truth_prob else None,
        n_samples=len(items),
    )


def evaluate(p, truth, p_true=None, taus: Sequence[float] = TAU_GRID, threshold: float = 0.5) -> MetricsReport:
    return aggregate([(p, truth, p_true)], taus, threshold)


def macro_average(reports: Sequence[MetricsReport]) -> dict:
    """Per-sample mean of the scalar summary fields (``None`` entries skipped)."""
    out = {}
    for key in ("dice", "balanced_accuracy", "precision", "recall", "roc_auc", "roc_auc_exact",
                "dice_range", "prob_mae", "brier", "polarization_fraction"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    out["n_samples"] = len(reports)
    return out


SUMMARY_COLUMNS = ("method", "averaging", "n_samples", "dice", "balanced_accuracy", "precision", "recall",
                   "roc_auc", "roc_auc_exact", "dice_range", "prob_mae", "brier", "polarization_fraction")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_reports(micro: dict[str, MetricsReport], macro: dict[str, dict], out_dir) -> dict[str, Path]:
    """``summary.csv`` (micro and macro rows), ``sweep.csv``, ``roc.csv`` and a JSON mirror."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("summary", "sweep", "roc")}
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for method in sorted(micro):
            s = micro[method].summary()
            w.writerow([method, "micro"] + [_fmt(s[c]) for c in SUMMARY_COLUMNS[2:]])
            if method in macro:
                w.writerow([method, "macro"] + [_fmt(macro[method].get(c)) for c in SUMMARY_COLUMNS[2:]])
    with open(paths["sweep"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "tau", "dice"))
        for method in sorted(micro):
            for tau, d in micro[method].dice_vs_threshold:
                w.writerow((method, _fmt(tau), _fmt(d)))
    with open(paths["roc"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "fpr", "tpr"))
        for method in sorted(micro):
            for fpr, tpr in micro[method].roc_points:
                w.writerow((method, _fmt(fpr), _fmt(tpr)))
    mirror = {m: {"micro": asdict(micro[m]), "macro": macro.get(m)} for m in sorted(micro)}
    paths["json"] = out / "report.json"
    paths["json"].write_text(json.dumps(mirror, indent=1, sort_keys=True) + "\n")
    return paths
