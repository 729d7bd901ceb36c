"""Synthetic IVOCT pullbacks with exact ground truth.

Each A-line is piecewise constant along depth: zero in the lumen, then
tissue with exponential attenuation. Fibrous-cap lesions put a bright band
(the cap) over a dark lipid band; calcifications are dark pockets with thin
bright borders. The guidewire blanks a wedge of A-lines behind a short bright
reflection. Multiplicative Rayleigh speckle is applied last.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .preprocess import GuidewireShadow, LumenBoundary
from .pullback import ClassTag, Geometry, Mask, Pullback

TISSUE_LEVEL = 0.45
CAP_LEVEL = 0.85
LIPID_LEVEL = 0.06
CALC_LEVEL = 0.12
CALC_BORDER_LEVEL = 0.95
GUIDEWIRE_LEVEL = 1.0
ATTENUATION_PX = 300.0

# sd/mean of a unit-mean Rayleigh variate: sqrt(4/pi - 1)
RAYLEIGH_CV = float(np.sqrt(4.0 / np.pi - 1.0))


@dataclass(frozen=True)
class LumenSpec:
    """Lumen radius in pixels: ``base + sum(amp * cos(k*theta + phase + rate*frame))``."""

    base_px: float = 120.0
    harmonics: tuple = ()  # (k, amp_px, phase, rate_per_frame)

    def radius(self, n_theta, frame):
        th = 2 * np.pi * np.arange(n_theta) / n_theta
        r = np.full(n_theta, float(self.base_px))
        for k, amp, phase, rate in self.harmonics:
            r += amp * np.cos(k * th + phase + rate * frame)
        return r


@dataclass(frozen=True)
class FcLesion:
    frames: tuple              # half-open (first, stop)
    arc_center_deg: float
    arc_width_deg: float
    cap_um: float
    lipid_um: float = 250.0
    cap_var_um: float = 0.0    # extra thickness at mid-arc, tapering to the edges
    drift_deg_per_frame: float = 0.0


@dataclass(frozen=True)
class CalcLesion:
    frames: tuple
    arc_center_deg: float
    arc_width_deg: float
    depth_um: tuple            # (top, bottom) below the lumen
    sharp_border: bool = True
    drift_deg_per_frame: float = 0.0


@dataclass(frozen=True)
class GuidewireSpec:
    center: float = 300.0      # A-line index
    width: int = 30
    drift_amp: float = 0.0
    drift_period: float = 40.0


@dataclass(frozen=True)
class SpeckleSpec:
    distribution: str = "rayleigh"
    snr: float = 5.0           # band mean / noise sd; inf disables speckle


@dataclass(frozen=True)
class PhantomSpec:
    n_frames: int = 8
    n_r: int = 968
    n_theta: int = 448
    lumen: LumenSpec = field(default_factory=LumenSpec)
    fc_lesions: tuple = ()
    calc_lesions: tuple = ()
    guidewire: GuidewireSpec = field(default_factory=GuidewireSpec)
    speckle: SpeckleSpec = field(default_factory=SpeckleSpec)
    geometry: Geometry = None
    seed: int = 0
    pullback_id: str = "phantom"

    def __post_init__(self):
        if self.geometry is None:
            object.__setattr__(self, "geometry", Geometry(theta_count=self.n_theta))
        validate(self)


class PhantomSpecError(ValueError):
    pass


def validate(spec):
    if spec.n_frames < 1 or spec.n_r < 1 or spec.n_theta < 8:
        raise PhantomSpecError("phantom dimensions too small")
    if spec.geometry.theta_count != spec.n_theta:
        raise PhantomSpecError("geometry.theta_count must equal n_theta")
    for les in tuple(spec.fc_lesions) + tuple(spec.calc_lesions):
        if not 0 <= les.arc_center_deg < 360 or not 0 < les.arc_width_deg < 360:
            raise PhantomSpecError("lesion arcs must lie within [0, 360)")
        a, b = les.frames
        if not 0 <= a < b <= spec.n_frames:
            raise PhantomSpecError(f"lesion frame span {les.frames} outside pullback")
    for les in spec.fc_lesions:
        if les.cap_um <= 0 or les.lipid_um <= 0 or les.cap_um + min(les.cap_var_um, 0) <= 0:
            raise PhantomSpecError("cap thickness and lipid depth must be positive")
    for les in spec.calc_lesions:
        if not 0 <= les.depth_um[0] < les.depth_um[1]:
            raise PhantomSpecError("calcification depth span must be increasing")
    for f in range(spec.n_frames):
        r = spec.lumen.radius(spec.n_theta, f)
        if r.min() < 1 or r.max() > spec.n_r - 50:
            raise PhantomSpecError("lumen radius leaves the imaged depth range")
    if spec.guidewire.width < 1 or spec.guidewire.width >= spec.n_theta:
        raise PhantomSpecError("guidewire width out of range")
    if spec.speckle.distribution != "rayleigh":
        raise PhantomSpecError("only Rayleigh speckle is supported")
    if not spec.speckle.snr > 0:
        raise PhantomSpecError("snr must be positive")


@dataclass
class PhantomTruth:
    fc_masks: list
    calc_masks: list
    lumens: list
    shadows: list
    thickness_um: np.ndarray  # (n_frames, n_theta); NaN where no cap


def rayleigh_speckle(shape, snr, rng):
    """Unit-mean multiplicative speckle with standard deviation ``1/snr``."""
    if np.isinf(snr):
        return np.ones(shape)
    scale = np.sqrt(2.0 / np.pi)  # makes the Rayleigh mean exactly 1
    r = rng.rayleigh(scale, size=shape)
    return 1.0 + (r - 1.0) / (snr * RAYLEIGH_CV)


def _arc_columns(center_deg, width_deg, n_theta):
    """Columns whose centre angle lies within the arc, plus position in [0, 1]."""
    ang = (np.arange(n_theta) + 0.5) * 360.0 / n_theta
    rel = (ang - (center_deg - width_deg / 2.0)) % 360.0
    inside = rel < width_deg
    return inside, np.clip(rel / width_deg, 0.0, 1.0)


def _guidewire_columns(gw, n_theta, frame):
    c = gw.center + gw.drift_amp * np.sin(2 * np.pi * frame / gw.drift_period)
    start = int(np.floor(c - (gw.width - 1) / 2.0)) % n_theta
    return GuidewireShadow(start, (start + gw.width - 1) % n_theta, n_theta)


def generate(spec):
    """Render ``spec`` into ``(Pullback, PhantomTruth)``."""
    validate(spec)
    dr = spec.geometry.radial_spacing_um
    n_r, n_t = spec.n_r, spec.n_theta
    rows = np.arange(n_r)[:, None]
    tag = ClassTag.FC
    vols, fc_masks, calc_masks, lumens, shadows = [], [], [], [], []
    thickness = np.full((spec.n_frames, n_t), np.nan)
    for f in range(spec.n_frames):
        rng = np.random.default_rng([spec.seed, f])
        lumen_px = np.rint(spec.lumen.radius(n_t, f)).astype(np.int64)
        depth = rows - lumen_px[None, :]          # pixels below the lumen surface
        tissue = depth >= 0
        clean = np.where(tissue, TISSUE_LEVEL, 0.0)
        fc = np.zeros((n_r, n_t), dtype=bool)
        calc = np.zeros((n_r, n_t), dtype=bool)
        for les in spec.fc_lesions:
            if not les.frames[0] <= f < les.frames[1]:
                continue
            centre = (les.arc_center_deg + les.drift_deg_per_frame * (f - les.frames[0])) % 360.0
            inside, u = _arc_columns(centre, les.arc_width_deg, n_t)
            cap_um = les.cap_um + les.cap_var_um * np.sin(np.pi * u)
            cap_px = np.maximum(np.rint(cap_um / dr), 1).astype(np.int64)
            lipid_px = int(np.rint(les.lipid_um / dr))
            cap_band = inside[None, :] & tissue & (depth < cap_px[None, :])
            lipid_band = inside[None, :] & (depth >= cap_px[None, :]) & (depth < cap_px[None, :] + lipid_px)
            clean = np.where(cap_band, CAP_LEVEL, clean)
            clean = np.where(lipid_band, LIPID_LEVEL, clean)
            fc |= cap_band
            thickness[f, inside] = np.fmin(thickness[f, inside], cap_um[inside])
        for les in spec.calc_lesions:
            if not les.frames[0] <= f < les.frames[1]:
                continue
            centre = (les.arc_center_deg + les.drift_deg_per_frame * (f - les.frames[0])) % 360.0
            inside, _ = _arc_columns(centre, les.arc_width_deg, n_t)
            top = int(np.rint(les.depth_um[0] / dr))
            bot = int(np.rint(les.depth_um[1] / dr))
            region = inside[None, :] & (depth >= top) & (depth < bot)
            clean = np.where(region, CALC_LEVEL, clean)
            if les.sharp_border:
                border = region & ((depth < top + 2) | (depth >= bot - 2))
                clean = np.where(border, CALC_BORDER_LEVEL, clean)
            calc |= region
        atten = np.exp(-np.maximum(depth, 0) / ATTENUATION_PX)
        img = clean * atten
        shadow = _guidewire_columns(spec.guidewire, n_t, f)
        cols = shadow.columns()
        img[:, cols] = 0.0
        for c in cols:
            top = max(lumen_px[c] - 14, 0)
            img[top:top + 4, c] = GUIDEWIRE_LEVEL
        img = np.clip(img * rayleigh_speckle(img.shape, spec.speckle.snr, rng), 0.0, 1.0)
        fc[:, cols] = False
        calc[:, cols] = False
        thickness[f, cols] = np.nan
        vols.append(img)
        fc_masks.append(Mask(fc.astype(np.uint8), tag))
        calc_masks.append(Mask(calc.astype(np.uint8), ClassTag.CALCIFICATION))
        valid = ~shadow.column_mask()
        lumens.append(LumenBoundary(np.clip(lumen_px, 0, n_r - 1), valid))
        shadows.append(shadow)
    pb = Pullback.from_array(np.stack(vols), spec.geometry, spec.pullback_id)
    return pb, PhantomTruth(fc_masks, calc_masks, lumens, shadows, thickness)


# -- standard suites ---------------------------------------------------------------

def _random_fc_pullback(rng, pid, n_frames, seed, snr=5.0, n_r=968, n_theta=448):
    lumen = LumenSpec(float(rng.uniform(100, 160)),
                      ((1, float(rng.uniform(5, 20)), float(rng.uniform(0, 2 * np.pi)), 0.05),
                       (2, float(rng.uniform(2, 8)), float(rng.uniform(0, 2 * np.pi)), -0.03)))
    gw = GuidewireSpec(float(rng.uniform(0, n_theta)), int(rng.integers(24, 36)), 3.0, 40.0)
    gw_deg = gw.center * 360.0 / n_theta
    lesions = []
    n_les = 1 + int(rng.random() < 0.35)
    for i in range(n_les):
        # keep lesions away from the guidewire so every frame carries visible cap
        centre = (gw_deg + 180.0 + rng.uniform(-60, 60) + 120.0 * i) % 360.0
        lesions.append(FcLesion(
            frames=(0, n_frames),
            arc_center_deg=float(centre),
            arc_width_deg=float(rng.uniform(50, 150)),
            cap_um=float(rng.uniform(50, 180)),
            lipid_um=float(rng.uniform(200, 350)),
            cap_var_um=float(rng.uniform(0, 60)),
            drift_deg_per_frame=float(rng.uniform(-3, 3)),
        ))
    return PhantomSpec(n_frames=n_frames, n_r=n_r, n_theta=n_theta, lumen=lumen, fc_lesions=tuple(lesions),
                       guidewire=gw, speckle=SpeckleSpec(snr=snr), seed=seed, pullback_id=pid)


def _random_calc_pullback(rng, pid, n_frames, seed, snr=5.0, n_r=968, n_theta=448):
    base = _random_fc_pullback(rng, pid, n_frames, seed, snr, n_r, n_theta)
    gw_deg = base.guidewire.center * 360.0 / n_theta
    lesions = []
    for i in range(1 + int(rng.random() < 0.35)):
        top = float(rng.uniform(40, 200))
        lesions.append(CalcLesion(
            frames=(0, n_frames),
            arc_center_deg=float((gw_deg + 180.0 + rng.uniform(-60, 60) + 120.0 * i) % 360.0),
            arc_width_deg=float(rng.uniform(50, 150)),
            depth_um=(top, top + float(rng.uniform(150, 350))),
            drift_deg_per_frame=float(rng.uniform(-3, 3)),
        ))
    return replace(base, fc_lesions=(), calc_lesions=tuple(lesions))


def _suite(kind, n_pullbacks, frames_each, seed, prefix):
    rng = np.random.default_rng(seed)
    make = _random_fc_pullback if kind == "fc" else _random_calc_pullback
    return [make(rng, f"{prefix}-{i:02d}", frames_each, seed * 1000 + i) for i in range(n_pullbacks)]


def _edge_cases():
    geo = Geometry(theta_count=448)
    wrap = PhantomSpec(
        n_frames=4, lumen=LumenSpec(110.0), guidewire=GuidewireSpec(center=437.0, width=30),
        fc_lesions=(FcLesion((0, 4), 180.0, 90.0, 100.0),), speckle=SpeckleSpec(snr=np.inf),
        geometry=geo, seed=11, pullback_id="edge-wrapping-shadow")
    boundary = PhantomSpec(
        n_frames=4, lumen=LumenSpec(110.0), guidewire=GuidewireSpec(center=40.0, width=30),
        fc_lesions=(FcLesion((0, 4), 200.0, 120.0, 65.0),), speckle=SpeckleSpec(snr=np.inf),
        geometry=geo, seed=12, pullback_id="edge-65um-cap")
    multi = PhantomSpec(
        n_frames=4, lumen=LumenSpec(130.0, ((1, 10.0, 0.0, 0.1),)), guidewire=GuidewireSpec(center=20.0, width=30),
        fc_lesions=(FcLesion((0, 4), 120.0, 60.0, 80.0), FcLesion((1, 4), 260.0, 70.0, 150.0)),
        calc_lesions=(CalcLesion((0, 2), 330.0, 30.0, (100.0, 300.0)),),
        speckle=SpeckleSpec(snr=np.inf), geometry=geo, seed=13, pullback_id="edge-multi-lesion")
    return [wrap, boundary, multi]


def standard_suites():
    """Named lists of pullback specs.

    ``fc-train-64`` and ``cal-pretrain-64`` hold 8 pullbacks of 8 frames,
    ``fc-test-16`` 2 pullbacks of 8 frames; every FC frame has a lesion.
    """
    return {
        "fc-train-64": _suite("fc", 8, 8, 1, "fctrain"),
        "fc-test-16": _suite("fc", 2, 8, 2, "fctest"),
        "cal-pretrain-64": _suite("cal", 8, 8, 3, "calpre"),
        "edge-cases": _edge_cases(),
    }


def truth_masks(truth, class_tag=ClassTag.FC):
    return truth.fc_masks if ClassTag(class_tag) is ClassTag.FC else truth.calc_masks
