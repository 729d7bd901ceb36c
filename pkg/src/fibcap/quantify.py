"""Fibrous-cap measurements from pixel-shifted masks.

Masks here live in pixel-shifted coordinates: row 0 of every A-line is the
lumen surface, so the physical radius of row ``i`` on A-line ``j`` is
``catheter_offset + (lumen[j] + i) * radial_spacing``.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pullback import Geometry, Mask, write_pgm

TCFA_THRESHOLD_UM = 65.0
HEATMAP_CLIP_UM = 655

DEFINITIONS = {
    "thickness": "per A-line: length of the contiguous FC run starting at the first (luminal) FC pixel",
    "arc_angle": "A-lines containing >= 1 FC pixel x 360 / n_theta",
    "area": "sum over FC pixels of rho * d_r * d_theta (polar area element)",
    "surface_area": "sum over frames of luminal FC arc length x frame spacing",
}


@dataclass(frozen=True)
class QuantConfig:
    tcfa_threshold_um: float = TCFA_THRESHOLD_UM
    geometry: Geometry = field(default_factory=Geometry)

    def __post_init__(self):
        if not self.tcfa_threshold_um > 0:
            raise ValueError("tcfa threshold must be positive")


def _arr(mask):
    return (mask.data if isinstance(mask, Mask) else np.asarray(mask)).astype(bool)


def _lumen_idx(lumen, n_theta):
    if lumen is None:
        return np.zeros(n_theta, dtype=np.int64)
    r = lumen.r_index if hasattr(lumen, "r_index") else np.asarray(lumen)
    r = np.asarray(r, dtype=np.int64)
    if r.shape != (n_theta,):
        raise ValueError(f"lumen has {r.shape} entries, mask has {n_theta} A-lines")
    return r


def _check(m, geometry):
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    if m.shape[1] != geometry.theta_count:
        raise ValueError(f"mask has {m.shape[1]} A-lines, geometry expects {geometry.theta_count}")


def thickness_per_aline(mask, geometry):
    """Cap thickness (um) per A-line; NaN where the A-line has no FC."""
    m = _arr(mask)
    _check(m, geometry)
    n_r = m.shape[0]
    has = m.any(axis=0)
    first = np.argmax(m, axis=0)
    rows = np.arange(n_r)[:, None]
    gap = ~m & (rows > first[None, :])
    end = np.where(gap.any(axis=0), np.argmax(gap, axis=0), n_r)
    out = (end - first).astype(np.float64) * geometry.radial_spacing_um
    out[~has] = np.nan
    return out


def arc_angle(mask, geometry):
    m = _arr(mask)
    _check(m, geometry)
    return float(np.count_nonzero(m.any(axis=0)) * 360.0 / m.shape[1])


def fc_area(mask, lumen, geometry):
    """FC area in mm^2 using the polar area element."""
    m = _arr(mask)
    _check(m, geometry)
    lum = _lumen_idx(lumen, m.shape[1])
    dr = geometry.radial_spacing_um
    rows = np.arange(m.shape[0])[:, None]
    rho = geometry.catheter_offset_um + (lum[None, :] + rows) * dr
    area_um2 = float(np.sum(np.where(m, rho, 0.0)) * dr * geometry.dtheta)
    return area_um2 * 1e-6


def _lumen_radius_um(lumen, n_theta, geometry):
    return geometry.catheter_offset_um + _lumen_idx(lumen, n_theta) * geometry.radial_spacing_um


def surface_area(masks, lumens, geometry):
    """Luminal FC surface (mm^2): arc length at the lumen times frame spacing."""
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one frame")
    total = 0.0
    for mask, lumen in zip(masks, lumens):
        m = _arr(mask)
        _check(m, geometry)
        rho_mm = _lumen_radius_um(lumen, m.shape[1], geometry) * 1e-3
        total += float(np.sum(rho_mm[m.any(axis=0)])) * geometry.dtheta * geometry.frame_spacing_mm
    return total


@dataclass
class FrameQuant:
    thickness_um: np.ndarray
    fc_arc_deg: float
    fc_area_mm2: float
    min_cap_thickness_um: float   # NaN without FC

    @property
    def has_fc(self):
        return bool(np.any(~np.isnan(self.thickness_um)))

    @property
    def mean_thickness_um(self):
        return float(np.nanmean(self.thickness_um)) if self.has_fc else math.nan


@dataclass
class FcQuantification:
    frames: list
    geometry: Geometry
    tcfa_threshold_um: float
    lumen_radius_um: np.ndarray   # (n_frames, n_theta)
    mean_thickness_um: float
    mean_arc_deg: float
    mean_area_mm2: float
    fc_surface_area_mm2: float
    min_cap_thickness_um: float
    tcfa: bool
    length_mm: float
    max_angle_deg: float

    def thickness_map(self):
        """(n_theta, n_frames) thickness in um, NaN where absent."""
        return np.stack([f.thickness_um for f in self.frames], axis=1)

    def summary(self):
        def num(x):
            return None if x is None or (isinstance(x, float) and math.isnan(x)) else round(float(x), 4)

        return {
            "n_frames": len(self.frames),
            "frames_with_fc": sum(f.has_fc for f in self.frames),
            "length_mm": num(self.length_mm),
            "max_angle_deg": num(self.max_angle_deg),
            "mean_thickness_um": num(self.mean_thickness_um),
            "mean_arc_deg": num(self.mean_arc_deg),
            "mean_area_mm2": num(self.mean_area_mm2),
            "surface_area_mm2": num(self.fc_surface_area_mm2),
            "min_cap_um": num(self.min_cap_thickness_um),
            "tcfa": bool(self.tcfa),
            "tcfa_threshold_um": self.tcfa_threshold_um,
            "catheter_offset_um": self.geometry.catheter_offset_um,
            "radial_spacing_um": self.geometry.radial_spacing_um,
            "frame_spacing_mm": self.geometry.frame_spacing_mm,
            "definitions": DEFINITIONS,
        }


def quantify_frame(mask, lumen, geometry):
    t = thickness_per_aline(mask, geometry)
    mn = float(np.nanmin(t)) if np.any(~np.isnan(t)) else math.nan
    return FrameQuant(t, arc_angle(mask, geometry), fc_area(mask, lumen, geometry), mn)


def quantify_pullback(masks, lumens, cfg=None):
    """Per-frame and per-pullback measurements.

    Pullback means run over frames that contain FC. ``length_mm`` spans the
    first to the last FC frame inclusive.
    """
    cfg = QuantConfig() if cfg is None else cfg
    geo = cfg.geometry
    masks = list(masks)
    lumens = list(lumens) if lumens is not None else [None] * len(masks)
    if len(lumens) != len(masks):
        raise ValueError("one lumen boundary per mask is required")
    frames = [quantify_frame(m, lum, geo) for m, lum in zip(masks, lumens)]
    with_fc = [f for f in frames if f.has_fc]
    idx = [i for i, f in enumerate(frames) if f.has_fc]
    lumen_r = np.stack([_lumen_radius_um(lum, geo.theta_count, geo) for lum in lumens]) if frames else \
        np.zeros((0, geo.theta_count))
    if with_fc:
        min_cap = float(min(f.min_cap_thickness_um for f in with_fc))
        mean_t = float(np.mean([f.mean_thickness_um for f in with_fc]))
        mean_arc = float(np.mean([f.fc_arc_deg for f in with_fc]))
        mean_area = float(np.mean([f.fc_area_mm2 for f in with_fc]))
        length = (idx[-1] - idx[0] + 1) * geo.frame_spacing_mm
        max_angle = float(max(f.fc_arc_deg for f in with_fc))
    else:
        min_cap = mean_t = mean_arc = mean_area = math.nan
        length = 0.0
        max_angle = 0.0
    surf = surface_area(masks, lumens, geo) if masks else 0.0
    tcfa = bool(with_fc) and min_cap < cfg.tcfa_threshold_um
    return FcQuantification(frames, geo, cfg.tcfa_threshold_um, lumen_r, mean_t, mean_arc, mean_area,
                            surf, min_cap, tcfa, length, max_angle)


def _colour(t, lo=0.0, hi=300.0):
    """Thin caps red, thick caps blue."""
    u = np.clip((t - lo) / (hi - lo), 0.0, 1.0)
    return 1.0 - u, 0.2, u


def export_heatmap(quant, out_dir, stem="fc"):
    """Write ``<stem>_thickness.pgm``, ``<stem>_lumen.obj`` and ``<stem>_summary.json``."""
    if not quant.frames or not any(f.has_fc for f in quant.frames):
        raise ValueError("nothing to export")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    tmap = quant.thickness_map()
    heat = np.clip(np.rint(np.nan_to_num(tmap, nan=0.0)), 0, HEATMAP_CLIP_UM).astype(np.uint16)
    pgm = out / f"{stem}_thickness.pgm"
    write_pgm(pgm, heat, maxval=HEATMAP_CLIP_UM)

    geo = quant.geometry
    n_f, n_t = quant.lumen_radius_um.shape
    theta = np.arange(n_t) * geo.dtheta
    lines = ["# lumen surface mesh; vertex colour encodes FC thickness",
             "# '# t <um>' follows each vertex; nan = no FC on that A-line"]
    for f in range(n_f):
        rho_mm = quant.lumen_radius_um[f] * 1e-3
        z = f * geo.frame_spacing_mm
        for j in range(n_t):
            t = tmap[j, f]
            r, g, b = _colour(t) if not np.isnan(t) else (0.7, 0.7, 0.7)
            lines.append(f"v {rho_mm[j] * math.cos(theta[j]):.5f} {rho_mm[j] * math.sin(theta[j]):.5f} "
                         f"{z:.5f} {r:.3f} {g:.3f} {b:.3f}")
            lines.append(f"# t {t:.1f}")
    for f in range(n_f - 1):
        for j in range(n_t):
            a = f * n_t + j + 1
            b = f * n_t + (j + 1) % n_t + 1
            lines.append(f"f {a} {b} {b + n_t} {a + n_t}")
    obj = out / f"{stem}_lumen.obj"
    obj.write_text("\n".join(lines) + "\n")

    js = out / f"{stem}_summary.json"
    js.write_text(json.dumps(quant.summary(), indent=2))
    return {"heatmap": pgm, "mesh": obj, "summary": js}
