"""Training-time augmentation.

Two families: spiral re-framing of a raw pullback (shift where each frame
starts along the continuous A-line sequence), and stochastic flip / scale /
shift of preprocessed frames.
"""

from dataclasses import dataclass, field

import numpy as np

from .preprocess import PreprocFrame
from .pullback import Mask, Pullback


@dataclass(frozen=True)
class AugmentConfig:
    offsets: tuple = field(default=(0, 80, 160, 240, 320, 400))
    flip_prob: float = 0.1
    scale_prob: float = 0.2
    scale_factor: float = 0.1
    shift_prob: float = 0.2
    shift_factor: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "scale_prob", "shift_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.scale_factor <= 0 or self.shift_factor <= 0:
            raise ValueError("factors must be positive")
        if any(o < 0 for o in self.offsets):
            raise ValueError("offsets must be non-negative")

    @classmethod
    def from_dict(cls, d):
        """Build from an ``[augment]`` config section."""
        known = {"offsets", "flip_prob", "scale_prob", "shift_prob", "factor", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown [augment] keys: {sorted(unknown)}")
        kw = {}
        if "offsets" in d:
            kw["offsets"] = tuple(int(o) for o in d["offsets"])
        for k in ("flip_prob", "scale_prob", "shift_prob"):
            if k in d:
                kw[k] = float(d[k])
        if "factor" in d:
            kw["scale_factor"] = kw["shift_factor"] = float(d["factor"])
        if "seed" in d:
            kw["rng_seed"] = int(d["seed"])
        return cls(**kw)


def offsets_by_increment(n_theta, increment=80, count=6):
    offs = [i * increment for i in range(count)]
    if offs[-1] >= n_theta:
        raise ValueError("offsets exceed the A-line count")
    return offs


def spiral_offsets(pullback, masks, offset):
    """Re-cut frames starting ``offset`` A-lines into the concatenated pullback.

    Offset 0 returns the inputs unchanged; any other offset yields N-1 frames
    because the trailing partial frame is dropped.
    """
    n = pullback.n_theta
    if not 0 <= offset < n:
        raise ValueError(f"offset {offset} outside [0, {n})")
    masks = list(masks)
    if masks and len(masks) != pullback.n_frames:
        raise ValueError("one mask per frame is required")
    for m, f in zip(masks, pullback.frames):
        m.aligned_to(f)
    if offset == 0:
        return pullback, masks
    if pullback.n_frames < 2:
        raise ValueError("re-framing with a non-zero offset needs at least two frames")
    big = np.concatenate([f.data for f in pullback.frames], axis=1)
    keep = pullback.n_frames - 1
    vol = np.stack([big[:, offset + k * n: offset + (k + 1) * n] for k in range(keep)])
    new_pb = Pullback.from_array(vol, pullback.geometry, f"{pullback.pullback_id}+{offset}",
                                 dtype=pullback.dtype, max_raw=pullback.max_raw)
    new_masks = []
    if masks:
        mbig = np.concatenate([m.data for m in masks], axis=1)
        tag = masks[0].class_tag
        new_masks = [Mask(mbig[:, offset + k * n: offset + (k + 1) * n], tag) for k in range(keep)]
    return new_pb, new_masks


def flip_theta(arr):
    return arr[:, ::-1]


def scale_intensity(arr, u):
    return arr * u


def shift_intensity(arr, v):
    return arr + v


def stochastic_augment(frame, mask, cfg, rng):
    """Random theta flip, intensity scale and intensity shift, in that order.

    Accepts arrays or :class:`PreprocFrame` / :class:`Mask`; returns a pair of
    arrays. The mask only follows the flip.
    """
    img = frame.data if isinstance(frame, PreprocFrame) else np.asarray(frame)
    lab = mask.data if isinstance(mask, Mask) else np.asarray(mask)
    if img.shape != lab.shape:
        raise ValueError("frame and mask shapes differ")
    if img.size and (img.min() < -1e-9 or img.max() > 1 + 1e-9):
        raise ValueError("frame must be normalised to [0, 1] before augmentation")
    out = img.copy()
    lab = lab.copy()
    if rng.random() < cfg.flip_prob:
        out = flip_theta(out)
        lab = flip_theta(lab)
    if rng.random() < cfg.scale_prob:
        out = scale_intensity(out, rng.uniform(1.0 - cfg.scale_factor, 1.0 + cfg.scale_factor))
    if rng.random() < cfg.shift_prob:
        out = shift_intensity(out, rng.uniform(-cfg.shift_factor, cfg.shift_factor))
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False), np.ascontiguousarray(lab)
