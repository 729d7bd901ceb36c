"""Pullback data model, ``.ivp`` container I/O, PGM masks, and display geometry."""

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PullbackFormatError(ValueError):
    """Raised for malformed pullback containers or mask files."""


@dataclass(frozen=True)
class Geometry:
    radial_spacing_um: float = 5.0
    frame_spacing_mm: float = 0.2
    theta_count: int = 448
    catheter_offset_um: float = 400.0

    def __post_init__(self):
        for name in ("radial_spacing_um", "frame_spacing_mm", "theta_count", "catheter_offset_um"):
            if not getattr(self, name) > 0:
                raise ValueError(f"geometry field {name} must be strictly positive")

    @property
    def dtheta(self):
        return 2.0 * np.pi / self.theta_count

    def to_dict(self):
        return {
            "radial_spacing_um": self.radial_spacing_um,
            "frame_spacing_mm": self.frame_spacing_mm,
            "theta_count": self.theta_count,
            "catheter_offset_um": self.catheter_offset_um,
        }


@dataclass(frozen=True)
class PolarFrame:
    """One (r, theta) frame; rows are depth samples, columns are A-lines."""

    data: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"frame must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("frame contains non-finite intensities")
        if np.any(arr < 0):
            raise ValueError("frame intensities must be non-negative")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def n_r(self):
        return self.data.shape[0]

    @property
    def n_theta(self):
        return self.data.shape[1]


class ClassTag(enum.Enum):
    FC = "FC"
    CALCIFICATION = "CALCIFICATION"


@dataclass(frozen=True)
class Mask:
    data: np.ndarray
    class_tag: ClassTag = ClassTag.FC

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask values must be 0 or 1")
        arr = arr.astype(np.uint8)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "class_tag", ClassTag(self.class_tag))

    @property
    def shape(self):
        return self.data.shape

    def aligned_to(self, frame):
        if self.data.shape != frame.data.shape:
            raise ValueError(f"mask shape {self.data.shape} does not match frame shape {frame.data.shape}")
        return self


@dataclass(frozen=True)
class Pullback:
    frames: tuple
    geometry: Geometry = field(default_factory=Geometry)
    pullback_id: str = "pullback"
    dtype: str = "u16"
    max_raw: float = 65535.0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a pullback needs at least one frame")
        shape = frames[0].data.shape
        for i, f in enumerate(frames):
            if f.data.shape != shape:
                raise ValueError(f"frame {i} has shape {f.data.shape}, expected {shape}")
            if f.frame_index != i:
                raise ValueError(f"frame indices must run 0..N-1; position {i} has {f.frame_index}")
        if self.geometry.theta_count != shape[1]:
            raise ValueError(f"geometry theta_count {self.geometry.theta_count} != n_theta {shape[1]}")
        if self.dtype not in ("u16", "f32"):
            raise ValueError("dtype must be 'u16' or 'f32'")
        object.__setattr__(self, "frames", frames)

    @classmethod
    def from_array(cls, volume, geometry=None, pullback_id="pullback", **kw):
        volume = np.asarray(volume, dtype=np.float64)
        if geometry is None:
            geometry = Geometry(theta_count=volume.shape[2])
        frames = tuple(PolarFrame(v, i) for i, v in enumerate(volume))
        return cls(frames, geometry, pullback_id, **kw)

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def n_r(self):
        return self.frames[0].n_r

    @property
    def n_theta(self):
        return self.frames[0].n_theta

    def volume(self):
        return np.stack([f.data for f in self.frames])


# -- .ivp container --------------------------------------------------------------

_SIDECAR_KEYS = ("n_frames", "n_r", "n_theta", "dtype", "max_raw", "radial_spacing_um",
                 "frame_spacing_mm", "catheter_offset_um", "pullback_id")
_RAW = {"u16": np.dtype("<u2"), "f32": np.dtype("<f4")}


def _paths(path):
    p = Path(path)
    base = p.name[:-len(p.suffix)] if p.suffix in (".ivp", ".json") else p.name
    return p.with_name(base + ".ivp"), p.with_name(base + ".json")


def load_pullback(path):
    """Read ``<name>.ivp`` plus its ``<name>.json`` sidecar."""
    ivp, side = _paths(path)
    try:
        meta = json.loads(side.read_text())
    except FileNotFoundError as exc:
        raise PullbackFormatError(f"missing sidecar {side}") from exc
    except json.JSONDecodeError as exc:
        raise PullbackFormatError(f"corrupt sidecar {side}: {exc}") from exc
    missing = [k for k in _SIDECAR_KEYS if k not in meta]
    if missing:
        raise PullbackFormatError(f"sidecar {side} lacks fields {missing}")
    if meta["dtype"] not in _RAW:
        raise PullbackFormatError(f"unsupported dtype {meta['dtype']!r}")
    dt = _RAW[meta["dtype"]]
    n, nr, nt = int(meta["n_frames"]), int(meta["n_r"]), int(meta["n_theta"])
    payload = ivp.read_bytes()
    expected = n * nr * nt * dt.itemsize
    if len(payload) != expected:
        raise PullbackFormatError(f"payload size mismatch: {len(payload)} bytes, sidecar implies {expected}")
    raw = np.frombuffer(payload, dtype=dt).reshape(n, nr, nt)
    if not np.all(np.isfinite(raw)):
        raise PullbackFormatError("payload contains non-finite values")
    max_raw = float(meta["max_raw"])
    if not max_raw > 0:
        raise PullbackFormatError("max_raw must be positive")
    geometry = Geometry(float(meta["radial_spacing_um"]), float(meta["frame_spacing_mm"]), nt,
                        float(meta["catheter_offset_um"]))
    vol = raw.astype(np.float64) / max_raw
    return Pullback.from_array(vol, geometry, str(meta["pullback_id"]), dtype=meta["dtype"], max_raw=max_raw)


def save_pullback(pullback, path):
    """Write the container; intensities are re-encoded with ``max_raw``."""
    ivp, side = _paths(path)
    ivp.parent.mkdir(parents=True, exist_ok=True)
    vol = pullback.volume() * pullback.max_raw
    if pullback.dtype == "u16":
        raw = np.clip(np.rint(vol), 0, 65535).astype("<u2")
    else:
        raw = vol.astype("<f4")
    ivp.write_bytes(raw.tobytes())
    g = pullback.geometry
    meta = {
        "n_frames": pullback.n_frames,
        "n_r": pullback.n_r,
        "n_theta": pullback.n_theta,
        "dtype": pullback.dtype,
        "max_raw": pullback.max_raw,
        "radial_spacing_um": g.radial_spacing_um,
        "frame_spacing_mm": g.frame_spacing_mm,
        "catheter_offset_um": g.catheter_offset_um,
        "pullback_id": pullback.pullback_id,
    }
    side.write_text(json.dumps(meta, indent=2))
    return ivp


# -- PGM ------------------------------------------------------------------------------

def write_pgm(path, image, maxval=255):
    """Binary (P5) PGM; 16-bit samples are big-endian per the format."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    dt = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + np.clip(img, 0, maxval).astype(dt).tobytes())


def read_pgm(path):
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PullbackFormatError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise PullbackFormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    data = buf[pos:pos + w * h * dt.itemsize]
    if len(data) != w * h * dt.itemsize:
        raise PullbackFormatError(f"{path}: PGM payload too short")
    return np.frombuffer(data, dtype=dt).reshape(h, w)


def save_mask(mask, path):
    data = mask.data if isinstance(mask, Mask) else np.asarray(mask)
    write_pgm(path, data.astype(np.uint8) * 255)


def load_mask(path, class_tag=ClassTag.FC):
    img = read_pgm(path)
    if not np.all((img == 0) | (img == 255)):
        raise PullbackFormatError(f"{path}: mask PGM must contain only 0 and 255")
    return Mask((img == 255).astype(np.uint8), class_tag)


# -- display --------------------------------------------------------------------------

def polar_to_cartesian(frame, geometry, out_size):
    """Resample a polar frame onto a square Cartesian grid.

    theta = 0 points along +x (to the right) and angles grow counter-clockwise.
    Samples whose radius falls outside the acquired depth range are 0.
    """
    if out_size < 2:
        raise ValueError("out_size must be at least 2")
    data = frame.data if isinstance(frame, PolarFrame) else np.asarray(frame, dtype=float)
    n_r, n_t = data.shape
    r_max = geometry.catheter_offset_um + n_r * geometry.radial_spacing_um
    pix = 2.0 * r_max / out_size
    c = (np.arange(out_size) + 0.5) * pix - r_max
    x = c[None, :]
    y = -c[:, None]
    rho = np.hypot(x, y)
    phi = np.mod(np.arctan2(y, x), 2 * np.pi)
    r = (rho - geometry.catheter_offset_um) / geometry.radial_spacing_um
    t = phi * n_t / (2 * np.pi)
    inside = (r >= 0) & (r <= n_r - 1)
    r = np.clip(r, 0, n_r - 1)
    r0 = np.minimum(np.floor(r).astype(int), n_r - 2) if n_r > 1 else np.zeros_like(r, dtype=int)
    fr = r - r0
    t0 = np.floor(t).astype(int) % n_t
    ft = t - np.floor(t)
    t1 = (t0 + 1) % n_t
    r1 = np.minimum(r0 + 1, n_r - 1)
    out = ((1 - fr) * (1 - ft) * data[r0, t0] + (1 - fr) * ft * data[r0, t1]
           + fr * (1 - ft) * data[r1, t0] + fr * ft * data[r1, t1])
    return np.where(inside, out, 0.0)


def log_display(frame, gain=100.0):
    """``log(1 + gain * I)`` rescaled so the brightest pixel is 1."""
    data = frame.data if isinstance(frame, PolarFrame) else np.asarray(frame, dtype=float)
    if np.any(data < 0):
        raise ValueError("intensities must be non-negative")
    out = np.log1p(gain * data)
    top = out.max()
    return out / top if top > 0 else np.zeros_like(out)
