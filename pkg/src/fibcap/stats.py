"""Pixel metrics, fold aggregation, regression / Bland-Altman agreement, COV."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

METRIC_NAMES = ("ppv", "npv", "sensitivity", "specificity", "accuracy", "dice")
TABLE_HEADERS = {
    "ppv": "PPV",
    "npv": "NPV",
    "sensitivity": "Sensitivity",
    "specificity": "Specificity",
    "accuracy": "Accuracy",
    "dice": "Dice",
}
LOA_MULTIPLIER = 1.96


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def confusion(pred, truth):
    p = np.asarray(getattr(pred, "data", pred)).astype(bool)
    t = np.asarray(getattr(truth, "data", truth)).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num, den):
    return num / den if den else None


@dataclass(frozen=True)
class MetricsEntry:
    """One set of ratios; ``None`` marks a metric whose denominator is 0."""

    ppv: float = None
    npv: float = None
    sensitivity: float = None
    specificity: float = None
    accuracy: float = None
    dice: float = None

    @property
    def undefined(self):
        return [k for k in METRIC_NAMES if getattr(self, k) is None]

    def to_dict(self):
        return asdict(self)


def metrics(counts):
    if counts.total <= 0:
        raise ValueError("no pixels were evaluated")
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    return MetricsEntry(
        ppv=_ratio(tp, tp + fp),
        npv=_ratio(tn, tn + fn),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        accuracy=(tp + tn) / counts.total,
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
    )


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n: int
    excluded: int = 0

    def format(self, digits=3, scale=1.0):
        return f"{self.mean * scale:.{digits}f} ± {self.std * scale:.{digits}f}"


def fold_aggregate(entries, min_entries=2):
    """Mean and sample (n-1) standard deviation of each metric.

    Undefined values are skipped and counted in ``excluded``.
    """
    entries = list(entries)
    if len(entries) < min_entries:
        raise ValueError(f"need at least {min_entries} entries, got {len(entries)}")
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(e, name) for e in entries if getattr(e, name) is not None]
        excluded = len(entries) - len(vals)
        if len(vals) == 0:
            out[name] = Aggregate(math.nan, math.nan, 0, excluded)
        elif len(vals) == 1:
            out[name] = Aggregate(float(vals[0]), math.nan, 1, excluded)
        else:
            out[name] = Aggregate(float(np.mean(vals)), float(np.std(vals, ddof=1)), len(vals), excluded)
    return out


def format_pm(mean, std, digits=3):
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def evaluate_masks(preds, truths):
    """Pooled (micro) metrics plus the per-frame (macro) aggregate."""
    counts = [confusion(p, t) for p, t in zip(preds, truths)]
    if not counts:
        raise ValueError("nothing to evaluate")
    pooled = ConfusionCounts()
    for c in counts:
        pooled = pooled + c
    per_frame = [metrics(c) for c in counts]
    return {
        "counts": asdict(pooled),
        "micro": metrics(pooled),
        "macro": fold_aggregate(per_frame, min_entries=1),
        "n_frames": len(counts),
    }


# -- agreement ---------------------------------------------------------------------

@dataclass
class AgreementReport:
    n: int
    slope: float
    intercept: float
    r_squared: float            # None when the reference has zero variance
    ba_bias: float
    ba_sd: float
    ba_loa_low: float
    ba_loa_high: float
    pct_within_loa: float
    n_within_loa: int
    cov_auto: float = None
    cov_truth: float = None
    flags: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def agreement(auto, truth):
    """OLS of ``auto`` on ``truth`` and Bland-Altman on ``auto - truth``."""
    a = np.asarray(auto, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if a.shape != t.shape or a.ndim != 1:
        raise ValueError("auto and truth must be 1-D and of equal length")
    if len(a) < 3:
        raise ValueError("agreement needs at least 3 pairs")
    flags = []
    tc = t - t.mean()
    ac = a - a.mean()
    sxx = float(tc @ tc)
    if sxx == 0:
        slope = intercept = r2 = None
        flags.append("zero variance in truth: regression undefined")
    else:
        slope = float(tc @ ac) / sxx
        intercept = float(a.mean() - slope * t.mean())
        resid = a - (intercept + slope * t)
        syy = float(ac @ ac)
        r2 = 1.0 if syy == 0 else float(min(max(1.0 - (resid @ resid) / syy, 0.0), 1.0))
    d = a - t
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    lo, hi = bias - LOA_MULTIPLIER * sd, bias + LOA_MULTIPLIER * sd
    # inclusive, with slack for round-off in d when sd is ~0
    tol = 1e-9 * max(1.0, float(np.abs(d).max()))
    within = int(np.count_nonzero((d >= lo - tol) & (d <= hi + tol)))

    def _cov(x):
        return coefficient_of_variation(x) if x.mean() != 0 else None

    return AgreementReport(len(a), slope, intercept, r2, bias, sd, lo, hi, 100.0 * within / len(a), within,
                           _cov(a), _cov(t), flags)


def coefficient_of_variation(values):
    """Sample standard deviation over mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two values")
    m = v.mean()
    if m == 0:
        raise ValueError("coefficient of variation undefined for zero mean")
    return float(v.std(ddof=1) / m)


def cov_from_summary(mean, sd):
    if mean == 0:
        raise ValueError("coefficient of variation undefined for zero mean")
    return sd / mean
