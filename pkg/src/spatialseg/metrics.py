"""Voxel-wise, lesion-wise and volumetric segmentation metrics, the hybrid
composite score and a Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelMap

LFPR_NOTE = "lfpr (predicted-count denominator)"


class MetricError(ValueError):
    pass


def _mask(x) -> np.ndarray:
    arr = x.data if isinstance(x, LabelMap) else np.asarray(x)
    return arr.astype(bool)


def _pair(pred, truth):
    p, t = _mask(pred), _mask(truth)
    if p.shape != t.shape:
        raise MetricError(f"dims mismatch: {p.shape} vs {t.shape}")
    return p, t


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _pair(pred, truth)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    denom = (c.tp + c.fn) + (c.tp + c.fp)
    return 1.0 if denom == 0 else 2.0 * c.tp / denom


def ppv(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def tpr(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0
    return c.tp / (c.tp + c.fn)


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label array (0 = background, 1..n in scan order) and component count."""
    if connectivity not in _STRUCTURES:
        raise MetricError("connectivity must be 6, 18 or 26")
    labels, n = ndimage.label(_mask(mask), structure=_STRUCTURES[connectivity])
    return labels, int(n)


@dataclass(frozen=True)
class LesionMatch:
    gt_components: int
    pred_components: int
    ltp: int
    lfp: int
    lfn: int
    connectivity: int = 26


def lesion_match(pred, truth, connectivity: int = 26) -> LesionMatch:
    """A truth lesion is detected if any predicted voxel touches it; a predicted
    component is false if it touches no truth voxel."""
    p, t = _pair(pred, truth)
    gt_lab, n_gt = connected_components(t, connectivity)
    pr_lab, n_pr = connected_components(p, connectivity)
    detected = np.unique(gt_lab[p & t])
    ltp = int(np.count_nonzero(detected))
    hit = np.unique(pr_lab[p & t])
    lfp = n_pr - int(np.count_nonzero(hit))
    return LesionMatch(n_gt, n_pr, ltp, lfp, n_gt - ltp, connectivity)


def ltpr(m: LesionMatch) -> float:
    if m.ltp + m.lfn == 0:
        return 1.0
    return m.ltp / (m.ltp + m.lfn)


def lfpr(m: LesionMatch) -> float:
    return 0.0 if m.pred_components == 0 else m.lfp / m.pred_components


def volume_correlation(cases) -> float:
    """Pearson correlation of predicted vs true lesion volumes across cases."""
    arr = np.asarray(cases, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise MetricError("need at least two (pred, truth) volume pairs")
    x, y = arr[:, 0], arr[:, 1]
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = (dx * dx).sum(), (dy * dy).sum()
    if sxx == 0 or syy == 0:
        raise MetricError("correlation undefined: a volume series has zero variance")
    return float((dx * dy).sum() / math.sqrt(sxx * syy))


def hybrid_score(dice_, ppv_, lfpr_, ltpr_, corr) -> float:
    return dice_ / 8 + ppv_ / 8 + (1 - lfpr_) / 4 + ltpr_ / 4 + corr / 4


@dataclass(frozen=True)
class MetricReport:
    dice: float
    ppv: float
    tpr: float
    lfpr: float
    ltpr: float
    corr: float
    case_id: str = ""

    @property
    def hybrid(self) -> float:
        return hybrid_score(self.dice, self.ppv, self.lfpr, self.ltpr, self.corr)

    def row(self) -> list:
        return [self.case_id, self.dice, self.ppv, self.tpr, self.lfpr, self.ltpr, self.corr, self.hybrid]


CSV_COLUMNS = ("case_id", "dice", "ppv", "tpr", "lfpr", "ltpr", "corr", "hybrid")


def mean_hybrid(reports) -> float:
    reports = list(reports)
    if not reports:
        raise MetricError("no reports to average")
    return 100.0 * sum(r.hybrid for r in reports) / len(reports)


def evaluate_cases(pairs, case_ids=None, connectivity: int = 26) -> list[MetricReport]:
    """Per-case reports; every report carries the dataset-level volume correlation."""
    pairs = list(pairs)
    case_ids = list(case_ids) if case_ids is not None else [str(i) for i in range(len(pairs))]
    per_case = []
    volumes = []
    for pred, truth in pairs:
        c = confusion(pred, truth)
        m = lesion_match(pred, truth, connectivity)
        per_case.append((dice(c), ppv(c), tpr(c), lfpr(m), ltpr(m)))
        volumes.append((c.tp + c.fp, c.tp + c.fn))
    try:
        corr = volume_correlation(volumes)
    except MetricError:
        corr = float("nan")
    return [MetricReport(d, p, t, lf, lt, corr, cid) for cid, (d, p, t, lf, lt) in zip(case_ids, per_case)]


def consistency_dice(seg_a, seg_b) -> float:
    return dice(confusion(seg_a, seg_b))


# -- Wilcoxon signed-rank ------------------------------------------------------

EXACT_MAX_N = 12


class WilcoxonError(ValueError):
    pass


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    pvalue: float
    n: int
    method: str


def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing the mean rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def _exact_pvalue(ranks: np.ndarray, w_plus: float) -> float:
    # doubled ranks are integers even with ties; count sign patterns by DP
    r2 = np.rint(2 * ranks).astype(int)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in r2:
        shifted = counts.copy()
        shifted[r:] += counts[:-r]
        counts = shifted
    n_patterns = 2 ** len(r2)
    w2 = int(round(2 * w_plus))
    lower = sum(counts[: w2 + 1])
    upper = sum(counts[w2:])
    p = 2 * min(lower, upper) / n_patterns
    return float(min(1.0, p))


def wilcoxon_signed_rank(scores_a, scores_b, exact: bool | None = None) -> WilcoxonResult:
    """Two-sided test on paired differences a - b (zero differences dropped).

    Exact enumeration of sign patterns when n <= 12 (or ``exact=True``),
    otherwise a normal approximation with tie and continuity corrections.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise WilcoxonError("score lists must be 1D and of equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise WilcoxonError("all differences are zero")
    if n < 6:
        raise WilcoxonError(f"need at least 6 nonzero differences, got {n}")
    ranks = _ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    use_exact = n <= EXACT_MAX_N if exact is None else exact
    if use_exact:
        return WilcoxonResult(stat, _exact_pvalue(ranks, w_plus), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    p = math.erfc(z / math.sqrt(2.0))
    return WilcoxonResult(stat, min(1.0, p), n, "normal")
