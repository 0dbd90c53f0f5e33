"""Evaluation metrics: entropy, DICE, ECE, AvU and the uncertainty-error curves.

All threshold sweeps count voxels exactly (``u <= t`` is "certain"); the
curve routines sort uncertainties once and use ``searchsorted`` so a full
101-point sweep costs one sort per scan.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

from .inaccuracy import InaccuracyDecomposition
from .numerics import EPS
from .volumes import LabelVolume, ProbVolume, UncertaintyVolume

DEFAULT_STEPS = 101
DEFAULT_BINS = 10
U_MAX_PRESETS = {6: 0.4, 2: 1.0}
METRIC_KEYS = ("dice", "ece", "avu_auc", "roc_auc", "prc_auc")


class UndefinedCurveError(ValueError):
    """Curve cannot be formed, e.g. a scan has no failure voxels."""


# ---------------------------------------------------------------- entropy

def normalized_entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Entropy of class distributions divided by ln(C), clipped to [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    c = p.shape[axis]
    h = -(p * np.log(np.maximum(p, EPS))).sum(axis=axis) / math.log(c)
    return np.clip(h, 0.0, 1.0)


def entropy_map(probs: ProbVolume) -> UncertaintyVolume:
    return UncertaintyVolume(normalized_entropy(probs.data, axis=-1))


# -------------------------------------------------------------- DICE / ECE

def dice(pred: LabelVolume, gt: LabelVolume, cls: int) -> float:
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"dims mismatch: pred {pred.dims} vs gt {gt.dims}")
    p = pred.data == cls
    g = gt.data == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def mean_foreground_dice(pred: LabelVolume, gt: LabelVolume, num_classes: int) -> float:
    """Average DICE over classes 1..C-1 (background excluded)."""
    return float(np.mean([dice(pred, gt, c) for c in range(1, num_classes)]))


def foreground_crop(pred: LabelVolume, gt: LabelVolume, margin: int = 4) -> np.ndarray:
    """Boolean (Z, Y, X) mask of the in-plane bounding box around any foreground."""
    fg = (pred.data > 0) | (gt.data > 0)
    region = np.zeros(fg.shape, dtype=bool)
    if not fg.any():
        region[:] = True
        return region
    ys, xs = np.nonzero(fg.any(axis=0))
    y0, y1 = max(ys.min() - margin, 0), ys.max() + margin + 1
    x0, x1 = max(xs.min() - margin, 0), xs.max() + margin + 1
    region[:, y0:y1, x0:x1] = True
    return region


def ece(probs: ProbVolume, decomp: InaccuracyDecomposition, bins: int = DEFAULT_BINS,
        region: np.ndarray | None = None) -> float:
    """Expected calibration error with equal-width confidence bins.

    A voxel counts as accurate unless it belongs to the failures mask.
    Bins are right-closed, ``(k/B, (k+1)/B]``, with confidence 0 in the first.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    conf = probs.data.max(axis=-1).astype(np.float64)
    acc = (~decomp.failures).astype(np.float64)
    if region is not None:
        conf, acc = conf[region], acc[region]
    conf, acc = conf.ravel(), acc.ravel()
    n = conf.size
    if n == 0:
        return 0.0
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=acc, minlength=bins)
    nz = counts > 0
    gaps = np.abs(acc_sum[nz] - conf_sum[nz]) / counts[nz]
    return float((counts[nz] / n * gaps).sum())


# -------------------------------------------------------------------- AvU

@dataclass(frozen=True)
class AvuCounts:
    n_ac: int
    n_au: int
    n_ic: int
    n_iu: int

    @property
    def total(self) -> int:
        return self.n_ac + self.n_au + self.n_ic + self.n_iu


def _flat_inputs(unc: UncertaintyVolume, decomp: InaccuracyDecomposition):
    u = np.asarray(unc.data, dtype=np.float64)
    if u.shape != decomp.failures.shape:
        raise ValueError(f"dims mismatch: uncertainty {u.shape} vs inaccuracy {decomp.failures.shape}")
    return u.ravel(), decomp.failures.ravel()


def avu_counts(unc: UncertaintyVolume, decomp: InaccuracyDecomposition, t: float) -> AvuCounts:
    if t < 0:
        raise ValueError("threshold must be >= 0")
    u, fail = _flat_inputs(unc, decomp)
    certain = u <= t
    return AvuCounts(
        n_ac=int(np.count_nonzero(~fail & certain)),
        n_au=int(np.count_nonzero(~fail & ~certain)),
        n_ic=int(np.count_nonzero(fail & certain)),
        n_iu=int(np.count_nonzero(fail & ~certain)),
    )


def avu_metric(counts: AvuCounts) -> float:
    if counts.total <= 0:
        raise ValueError("AvU undefined for zero voxels")
    return (counts.n_ac + counts.n_iu) / counts.total


def threshold_grid(u_max: float, steps: int = DEFAULT_STEPS) -> np.ndarray:
    if not (0.0 < u_max <= 1.0):
        raise ValueError(f"u_max must lie in (0, 1], got {u_max}")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    return np.linspace(0.0, u_max, steps)


def sweep_counts(unc: UncertaintyVolume, decomp: InaccuracyDecomposition,
                 thresholds: np.ndarray) -> dict[str, np.ndarray]:
    """Exact n_ac/n_au/n_ic/n_iu at every threshold (int64 arrays)."""
    u, fail = _flat_inputs(unc, decomp)
    acc_u = np.sort(u[~fail])
    fail_u = np.sort(u[fail])
    n_ac = np.searchsorted(acc_u, thresholds, side="right").astype(np.int64)
    n_ic = np.searchsorted(fail_u, thresholds, side="right").astype(np.int64)
    return {"n_ac": n_ac, "n_au": acc_u.size - n_ac, "n_ic": n_ic, "n_iu": fail_u.size - n_ic}


@dataclass(frozen=True, eq=False)
class CurveSeries:
    """Threshold-swept curve.

    ``values`` holds the y-value per threshold; ``x`` is set for ROC/PRC
    curves (FPR or recall). ``auc`` is computed on the completed curve.
    """

    kind: str
    thresholds: np.ndarray
    values: np.ndarray
    auc: float
    x: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.x is None:
            buf.write("threshold,value\n")
            for t, v in zip(self.thresholds, self.values):
                buf.write(f"{t:.6f},{v:.6f}\n")
        else:
            buf.write("x,y\n")
            for x, y in zip(self.x, self.values):
                buf.write(f"{x:.6f},{y:.6f}\n")
        return buf.getvalue()


def avu_curve(unc: UncertaintyVolume, decomp: InaccuracyDecomposition, u_max: float,
              steps: int = DEFAULT_STEPS) -> CurveSeries:
    """AvU over [0, u_max]; AUC by the trapezoid rule divided by u_max."""
    ts = threshold_grid(u_max, steps)
    c = sweep_counts(unc, decomp, ts)
    total = c["n_ac"] + c["n_au"] + c["n_ic"] + c["n_iu"]
    if total[0] == 0:
        raise ValueError("AvU undefined for zero voxels")
    values = (c["n_ac"] + c["n_iu"]) / total
    auc = float(np.trapezoid(values, ts) / u_max)
    return CurveSeries("avu", ts, values, auc)


def _dedupe_sorted(x: np.ndarray, y: np.ndarray):
    pts = np.unique(np.stack([x, y], axis=1), axis=0)  # lexicographic: x then y
    return pts[:, 0], pts[:, 1]


def unc_roc_curve(unc: UncertaintyVolume, decomp: InaccuracyDecomposition, u_max: float,
                  steps: int = DEFAULT_STEPS) -> CurveSeries:
    """Uncertainty-ROC: TPR = p(uncertain | failure), FPR = p(uncertain | accurate)."""
    ts = threshold_grid(u_max, steps)
    c = sweep_counts(unc, decomp, ts)
    n_fail = c["n_iu"][0] + c["n_ic"][0]
    n_acc = c["n_au"][0] + c["n_ac"][0]
    if n_fail == 0:
        raise UndefinedCurveError("undefined TPR: no failure voxels")
    if n_acc == 0:
        raise UndefinedCurveError("undefined FPR: no accurate voxels")
    tpr = c["n_iu"] / n_fail
    fpr = c["n_au"] / n_acc
    xs, ys = _dedupe_sorted(np.concatenate([[0.0], fpr, [1.0]]),
                            np.concatenate([[0.0], tpr, [1.0]]))
    return CurveSeries("roc", ts, tpr, float(np.trapezoid(ys, xs)), x=fpr)


def unc_prc_curve(unc: UncertaintyVolume, decomp: InaccuracyDecomposition, u_max: float,
                  steps: int = DEFAULT_STEPS) -> CurveSeries:
    """Uncertainty-PRC: precision = p(failure | uncertain), recall = p(uncertain | failure).

    Thresholds where nothing is uncertain are dropped. The curve is extended
    flat from its lowest-recall point to recall 0 before integrating.
    """
    ts = threshold_grid(u_max, steps)
    c = sweep_counts(unc, decomp, ts)
    n_fail = c["n_iu"][0] + c["n_ic"][0]
    if n_fail == 0:
        raise UndefinedCurveError("undefined recall: no failure voxels")
    flagged = c["n_iu"] + c["n_au"]
    keep = flagged > 0
    if not keep.any():
        raise UndefinedCurveError("no threshold leaves any voxel uncertain")
    ts = ts[keep]
    precision = c["n_iu"][keep] / flagged[keep]
    recall = c["n_iu"][keep] / n_fail
    order = np.lexsort((precision, recall))
    r, p = recall[order], precision[order]
    r = np.concatenate([[0.0], r])
    p = np.concatenate([[p[0]], p])
    return CurveSeries("prc", ts, precision, float(np.trapezoid(p, r)), x=recall)


def mann_whitney_auc(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """P(pos > neg) + 0.5 P(pos == neg) via ranks."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


# -------------------------------------------------------------- Wilcoxon

class WilcoxonResult(NamedTuple):
    statistic: float
    pvalue: float
    n: int
    method: str


EXACT_MAX_N = 12


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired scores.

    Zero differences are dropped. For n <= 12 the null distribution is
    enumerated over all 2**n sign assignments of the (mid)ranks; larger n uses
    the normal approximation with tie correction, no continuity correction.
    The statistic is min(W+, W-).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1D and of equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("degenerate pairing: all differences are zero")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = float(ranks.sum())
    stat = min(w_plus, total - w_plus)
    if n <= EXACT_MAX_N:
        signs = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
        dist = signs @ ranks
        tol = 1e-9
        lower = np.count_nonzero(dist <= w_plus + tol) / dist.size
        upper = np.count_nonzero(dist >= w_plus - tol) / dist.size
        return WilcoxonResult(stat, min(1.0, 2.0 * min(lower, upper)), n, "exact")
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    z = (w_plus - n * (n + 1) / 4.0) / math.sqrt(var)
    return WilcoxonResult(stat, min(1.0, math.erfc(abs(z) / math.sqrt(2.0))), n, "normal")


# ------------------------------------------------------ hyperparameter rule

_HIGHER_IS_BETTER = {"dice": True, "ece": False, "avu_auc": True, "roc_auc": True, "prc_auc": True}


def select_hyperparameter(candidates: Sequence[Mapping], drop_points: float = 10.0,
                          min_wins: int = 4):
    """Pick one hyperparameter from a sweep, in the order it was run.

    Each candidate maps ``id`` plus the five metric keys to values in
    x10^-2 points (ECE lower is better). Candidates whose DICE or AvU-AUC
    sits more than ``drop_points`` below the best, or whose ECE sits more
    than ``drop_points`` above the best, are ignored. A survivor that is best
    (ties included) on at least ``min_wins`` metrics wins; otherwise the
    survivor closest to the middle of the full sweep is taken, lower index on
    a tie, skipping any survivor that is worst on all five metrics.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    cands = list(candidates)
    for c in cands:
        missing = [k for k in METRIC_KEYS if k not in c]
        if missing:
            raise ValueError(f"candidate {c.get('id')!r} lacks {missing}")
    idx = list(range(len(cands)))
    best_dice = max(cands[i]["dice"] for i in idx)
    idx = [i for i in idx if best_dice - cands[i]["dice"] <= drop_points]
    best_ece = min(cands[i]["ece"] for i in idx)
    best_avu = max(cands[i]["avu_auc"] for i in idx)
    idx = [i for i in idx
           if cands[i]["ece"] - best_ece <= drop_points and best_avu - cands[i]["avu_auc"] <= drop_points]
    if len(idx) == 1:
        return cands[idx[0]]["id"]
    wins = {i: 0 for i in idx}
    for key in METRIC_KEYS:
        vals = [cands[i][key] for i in idx]
        best = max(vals) if _HIGHER_IS_BETTER[key] else min(vals)
        for i, v in zip(idx, vals):
            if v == best:
                wins[i] += 1
    winners = [i for i in idx if wins[i] >= min_wins]
    if len(winners) == 1:
        return cands[winners[0]]["id"]
    # a survivor that is worst on every metric never wins the fallback
    worst_everywhere = set(idx)
    for key in METRIC_KEYS:
        vals = [cands[i][key] for i in idx]
        worst = min(vals) if _HIGHER_IS_BETTER[key] else max(vals)
        worst_everywhere &= {i for i, v in zip(idx, vals) if v == worst}
    pool = [i for i in idx if i not in worst_everywhere] or idx
    centre = (len(cands) - 1) / 2.0
    pick = min(pool, key=lambda i: (abs(i - centre), i))
    return cands[pick]["id"]


# --------------------------------------------------------------- reports

def _fixed(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return "null"
        s = f"{v:.6f}"
        return "0.000000" if s == "-0.000000" else s
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_fixed(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        items = [f"{pad}{_fixed(v, indent, level + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps_fixed(obj, indent: int = 2) -> str:
    """JSON with every float printed at exactly six decimals."""
    return _fixed(obj, indent, 0) + "\n"


# --------------------------------------------------------- per-scan bundle

@dataclass(frozen=True, eq=False)
class ScanMetrics:
    """All five scores for one scan (fractions in [0, 1]; ROC/PRC may be None)."""

    dice: float
    ece: float
    avu_auc: float
    roc_auc: float | None
    prc_auc: float | None
    curves: dict

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}


def scan_metrics(probs: ProbVolume, gt: LabelVolume, u_max: float | None = None,
                 steps: int = DEFAULT_STEPS, kernel=(3, 3, 1), bins: int = DEFAULT_BINS,
                 crop: bool = False) -> ScanMetrics:
    """DICE, ECE, AvU-AUC, uncertainty-ROC/PRC AUC for one predicted scan.

    ROC and PRC are ``None`` when the scan has no failure voxels.
    """
    from .inaccuracy import decompose
    from .volumes import argmax_labels

    c = probs.num_classes
    if gt.num_classes is not None and gt.num_classes != c:
        raise ValueError(f"class count mismatch: probabilities have {c}, labels {gt.num_classes}")
    u_max = U_MAX_PRESETS.get(c, 1.0) if u_max is None else u_max
    pred = argmax_labels(probs)
    decomp = decompose(pred, gt, kernel)
    unc = entropy_map(probs)
    region = foreground_crop(pred, gt) if crop else None
    curves = {"avu": avu_curve(unc, decomp, u_max, steps)}
    roc = prc = None
    try:
        curves["roc"] = unc_roc_curve(unc, decomp, u_max, steps)
        curves["prc"] = unc_prc_curve(unc, decomp, u_max, steps)
        roc, prc = curves["roc"].auc, curves["prc"].auc
    except UndefinedCurveError:
        curves.pop("roc", None)
    return ScanMetrics(mean_foreground_dice(pred, gt, c), ece(probs, decomp, bins, region),
                       curves["avu"].auc, roc, prc, curves)


def summarize(values: Sequence[float | None]) -> dict:
    """Mean and population std over the defined (non-None) values."""
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
