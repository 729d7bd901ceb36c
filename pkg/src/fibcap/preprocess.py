"""Raw polar frame -> aligned, denoised network input.

Steps: guidewire shadow detection, lumen boundary, per-A-line pixel shift so
the lumen sits on row 0, crop to the first 200 depth samples, 7x7 Gaussian.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from skimage.filters import threshold_otsu

from .pullback import Mask, PolarFrame

DEPTH = 200
GW_PRIOR_WIDTH = 30
GW_LAMBDA = 0.5          # width penalty, in units of the mean column score
GW_JUMP_COST = 1.0       # per A-line of centre movement between frames
GW_MIN_CONFIDENCE = 0.25
LUMEN_GAMMA = 2.0


class LumenNotFoundError(ValueError):
    pass


@dataclass(frozen=True)
class GuidewireShadow:
    """Inclusive, possibly wrapping, A-line interval ``[theta_start, theta_end]``."""

    theta_start: int
    theta_end: int
    n_theta: int
    low_confidence: bool = False
    score_gap: float = 1.0

    def __post_init__(self):
        if not (0 <= self.theta_start < self.n_theta and 0 <= self.theta_end < self.n_theta):
            raise ValueError("shadow bounds out of range")
        if not 1 <= self.width < self.n_theta:
            raise ValueError("shadow width must lie in [1, n_theta)")

    @property
    def width(self):
        return (self.theta_end - self.theta_start) % self.n_theta + 1

    def columns(self):
        return (self.theta_start + np.arange(self.width)) % self.n_theta

    def column_mask(self):
        m = np.zeros(self.n_theta, dtype=bool)
        m[self.columns()] = True
        return m

    def to_dict(self):
        return {"theta_start": self.theta_start, "theta_end": self.theta_end,
                "width": self.width, "low_confidence": self.low_confidence,
                "score_gap": self.score_gap}


@dataclass(frozen=True)
class LumenBoundary:
    r_index: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r_index, dtype=np.int64)
        v = np.asarray(self.valid, dtype=bool)
        if r.shape != v.shape or r.ndim != 1:
            raise ValueError("r_index and valid must be 1-D arrays of equal length")
        if np.any(r < 0):
            raise ValueError("lumen indices must be non-negative")
        object.__setattr__(self, "r_index", r)
        object.__setattr__(self, "valid", v)

    def to_dict(self):
        return {"r_index": self.r_index.tolist(), "valid": self.valid.astype(int).tolist()}


@dataclass(frozen=True)
class PreprocFrame:
    data: np.ndarray
    lumen: LumenBoundary
    shadow: GuidewireShadow
    source_frame_index: int = 0


# -- guidewire ------------------------------------------------------------------

def _column_scores(data):
    s = data.sum(axis=0).astype(np.float64)
    mean = s.mean()
    return s, mean


def _interval_costs(data, prior=GW_PRIOR_WIDTH, lam=GW_LAMBDA):
    """Cost of every (width, start) interval, normalised by the mean column score.

    Each column contributes ``score/mean - ref`` with ``ref`` half the median
    normalised score, so shadow columns are negative and tissue positive. Width
    deviation from ``prior`` costs ``lam * (w - prior)**2 / prior``.
    """
    n = data.shape[1]
    s, mean = _column_scores(data)
    if mean <= 0:
        sn = np.zeros(n)
        ref = 0.5
    else:
        sn = s / mean
        ref = 0.5 * np.median(sn)
    c = sn - ref
    widths = np.arange(max(1, prior // 4), min(n - 1, 3 * prior) + 1)
    csum = np.concatenate([[0.0], np.cumsum(np.concatenate([c, c]))])
    starts = np.arange(n)
    ends = starts[None, :] + widths[:, None]
    cost = csum[ends] - csum[starts][None, :]
    cost += lam * (widths[:, None] - prior) ** 2 / prior
    return widths, cost, sn


def _score_gap(start, width, n, sn):
    inside = np.zeros(n, dtype=bool)
    inside[(start + np.arange(width)) % n] = True
    return float(sn[~inside].mean() - sn[inside].mean())


def _make_shadow(start, width, n, sn, prior=GW_PRIOR_WIDTH):
    """Build the shadow; an indistinct one falls back to ``prior`` A-lines wide."""
    gap = _score_gap(start, width, n, sn)
    low = gap < GW_MIN_CONFIDENCE
    if low and width != prior:
        centre = start + (width - 1) // 2
        width = prior
        start = (centre - (prior - 1) // 2) % n
    return GuidewireShadow(int(start), int((start + width - 1) % n), n,
                           low_confidence=bool(low), score_gap=gap)


def detect_guidewire(frame, prior=GW_PRIOR_WIDTH, lam=GW_LAMBDA):
    """Darkest wrapping A-line interval of one frame, width regularised toward ``prior``."""
    data = frame.data if isinstance(frame, PolarFrame) else np.asarray(frame, dtype=float)
    n = data.shape[1]
    if n < 8:
        raise ValueError(f"frame too narrow for guidewire detection ({n} A-lines)")
    widths, cost, sn = _interval_costs(data, prior, lam)
    wi, start = np.unravel_index(np.argmin(cost), cost.shape)
    return _make_shadow(start, widths[wi], n, sn, prior)


def _circ_dist(n):
    d = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
    return np.minimum(d, n - d)


def detect_guidewire_pullback(frames, prior=GW_PRIOR_WIDTH, lam=GW_LAMBDA, jump_cost=GW_JUMP_COST):
    """Per-frame shadows with interval centres smoothed across frames.

    A Viterbi pass over candidate centres trades each frame's best interval
    cost at that centre against ``jump_cost`` per A-line of centre movement.
    """
    datas = [f.data if isinstance(f, PolarFrame) else np.asarray(f, dtype=float) for f in frames]
    n = datas[0].shape[1]
    if n < 8:
        raise ValueError(f"frame too narrow for guidewire detection ({n} A-lines)")
    per_frame = []
    centre_cost = []
    for data in datas:
        widths, cost, sn = _interval_costs(data, prior, lam)
        # re-index cost by centre: centre = start + (w - 1) // 2
        by_centre = np.empty_like(cost)
        for i, w in enumerate(widths):
            by_centre[i] = np.roll(cost[i], (w - 1) // 2)
        per_frame.append((widths, by_centre, sn))
        centre_cost.append(by_centre.min(axis=0))
    trans = jump_cost * _circ_dist(n)
    acc = centre_cost[0].copy()
    back = []
    for cc in centre_cost[1:]:
        tot = acc[:, None] + trans
        arg = np.argmin(tot, axis=0)
        back.append(arg)
        acc = tot[arg, np.arange(n)] + cc
    centres = [int(np.argmin(acc))]
    for arg in reversed(back):
        centres.append(int(arg[centres[-1]]))
    centres.reverse()
    shadows = []
    for (widths, by_centre, sn), c in zip(per_frame, centres):
        wi = int(np.argmin(by_centre[:, c]))
        w = int(widths[wi])
        shadows.append(_make_shadow((c - (w - 1) // 2) % n, w, n, sn, prior))
    return shadows


# -- lumen ----------------------------------------------------------------------

def _running_mean(data, k):
    c = np.concatenate([np.zeros((1, data.shape[1])), np.cumsum(data, axis=0)])
    n = data.shape[0]
    hi = np.minimum(np.arange(n) + k, n)
    return (c[hi] - c[:n]) / (hi - np.arange(n))[:, None]


def _edge_strength(data, k=3):
    """Mean of the next ``k`` samples minus mean of the previous ``k``."""
    n = data.shape[0]
    c = np.concatenate([np.zeros((1, data.shape[1])), np.cumsum(data, axis=0)])
    r = np.arange(n)
    hi = np.minimum(r + k, n)
    lo = np.maximum(r - k, 0)
    fwd = (c[hi] - c[r]) / (hi - r)[:, None]
    cnt = (r - lo)[:, None]
    bwd = np.where(cnt > 0, (c[r] - c[lo]) / np.maximum(cnt, 1), 0.0)
    return fwd - bwd


def segment_lumen(frame, shadow, gamma=LUMEN_GAMMA, window=(4, 8)):
    """Lumen depth per A-line via threshold candidates and a smoothness DP.

    Intensities are expressed in units of the frame's Otsu threshold, so
    ``gamma`` is the cost of a one-pixel step between neighbouring A-lines
    in those units.
    """
    data = frame.data if isinstance(frame, PolarFrame) else np.asarray(frame, dtype=float)
    n_r, n = data.shape
    if not np.any(data > 0):
        raise LumenNotFoundError("no lumen found")
    thr = threshold_otsu(data)
    if thr <= 0:
        thr = data[data > 0].min() / 2
    norm = data / thr
    in_shadow = shadow.column_mask()
    above = _running_mean(norm, 5) > 1.0
    has = above.any(axis=0) & ~in_shadow
    if not has.any():
        raise LumenNotFoundError("no lumen found")
    cand = np.where(has, np.argmax(above, axis=0), -1)
    edge = _edge_strength(norm)
    lo_w, hi_w = window
    rows = np.arange(n_r)[:, None]
    allowed = np.where(has[None, :], (rows >= cand[None, :] - lo_w) & (rows <= cand[None, :] + hi_w), True)
    unary = np.where(allowed, -edge, np.inf)
    # walk the circle starting just after the shadow so the path never crosses it
    order = (shadow.theta_end + 1 + np.arange(n)) % n
    order = order[~in_shadow[order]]
    r_idx = np.arange(n_r, dtype=np.float64)
    acc = unary[:, order[0]].copy()
    accs = [acc]
    for j in order[1:]:
        fwd = np.minimum.accumulate(acc - gamma * r_idx) + gamma * r_idx
        bwd = (np.minimum.accumulate((acc + gamma * r_idx)[::-1]))[::-1] - gamma * r_idx
        acc = np.minimum(fwd, bwd) + unary[:, j]
        accs.append(acc)
    path = np.empty(len(order), dtype=np.int64)
    path[-1] = int(np.argmin(accs[-1]))
    for t in range(len(order) - 2, -1, -1):
        path[t] = int(np.argmin(accs[t] + gamma * np.abs(r_idx - path[t + 1])))
    r_index = np.zeros(n, dtype=np.int64)
    r_index[order] = path
    valid = ~in_shadow
    # linear interpolation across the (wrapping) shadow interval
    cols = shadow.columns()
    left = r_index[(shadow.theta_start - 1) % n]
    right = r_index[(shadow.theta_end + 1) % n]
    frac = (np.arange(1, len(cols) + 1)) / (len(cols) + 1)
    r_index[cols] = np.rint(left + (right - left) * frac).astype(np.int64)
    return LumenBoundary(np.clip(r_index, 0, n_r - 1), valid)


# -- shift / crop / filter ----------------------------------------------------

def pixel_shift(frame, lumen, shadow=None):
    """Move each A-line up so its lumen index lands on row 0; zero-pad the tail."""
    data = frame.data if isinstance(frame, PolarFrame) else np.asarray(frame)
    n_r, n = data.shape
    rows = np.arange(n_r)[:, None] + lumen.r_index[None, :]
    inside = rows < n_r
    out = np.where(inside, data[np.minimum(rows, n_r - 1), np.arange(n)[None, :]], 0)
    out = out.astype(data.dtype, copy=False)
    if shadow is not None:
        out[:, shadow.columns()] = 0
    return out


def gaussian_kernel(size=7, sigma=1.0):
    k = np.arange(size) - (size - 1) / 2
    w = np.exp(-k * k / (2 * sigma * sigma))
    return w / w.sum()


def crop_and_filter(shifted, lumen=None, shadow=None, source_frame_index=0, depth=DEPTH):
    """Keep the first ``depth`` rows and apply the separable 7x7, sigma 1 Gaussian.

    Borders reflect along depth and wrap along theta. Shadow columns, when
    given, are re-zeroed after filtering.
    """
    data = np.asarray(shifted, dtype=np.float64)
    if data.shape[0] < depth:
        raise ValueError(f"need at least {depth} depth samples, got {data.shape[0]}")
    k = gaussian_kernel()
    out = correlate1d(data[:depth], k, axis=0, mode="reflect")
    out = correlate1d(out, k, axis=1, mode="wrap")
    if shadow is not None:
        out[:, shadow.columns()] = 0.0
    if lumen is None:
        lumen = LumenBoundary(np.zeros(data.shape[1], dtype=np.int64), np.ones(data.shape[1], dtype=bool))
    return PreprocFrame(out, lumen, shadow, source_frame_index)


def preprocess_frame(frame, shadow=None, depth=DEPTH):
    if shadow is None:
        shadow = detect_guidewire(frame)
    lumen = segment_lumen(frame, shadow)
    shifted = pixel_shift(frame, lumen, shadow)
    idx = frame.frame_index if isinstance(frame, PolarFrame) else 0
    return crop_and_filter(shifted, lumen, shadow, idx, depth)


def preprocess_pullback(pullback, depth=DEPTH):
    """Preprocess every frame, with guidewire centres smoothed across frames."""
    shadows = detect_guidewire_pullback(pullback.frames)
    return [preprocess_frame(f, s, depth) for f, s in zip(pullback.frames, shadows)]


def preprocess_mask(mask, lumen, shadow=None, depth=DEPTH):
    """Apply the same shift and crop to a raw-coordinate label (no filtering)."""
    data = mask.data if isinstance(mask, Mask) else np.asarray(mask)
    out = pixel_shift(data.astype(np.uint8), lumen, shadow)[:depth]
    if isinstance(mask, Mask):
        return Mask(out, mask.class_tag)
    return out
