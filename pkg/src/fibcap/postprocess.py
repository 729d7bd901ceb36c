"""Binarise network output, open with a disk, fill enclosed holes.

Masks are (r, theta) arrays. The theta axis (columns) is periodic; beyond
the first and last rows everything is background.
"""

import numpy as np
from scipy import ndimage

from .pullback import Mask


def disk(radius):
    """Offsets (dr, dt) with dr**2 + dt**2 <= radius**2."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    d = np.arange(-radius, radius + 1)
    dr, dt = np.meshgrid(d, d, indexing="ij")
    keep = dr * dr + dt * dt <= radius * radius
    return list(zip(dr[keep].tolist(), dt[keep].tolist()))


def _shift(m, dr, dt, wrap):
    """out[r, t] = m[r + dr, t + dt]; rows outside the image read as 0."""
    n_r, n_t = m.shape
    out = np.zeros_like(m)
    if abs(dr) >= n_r:
        return out
    src = m[max(dr, 0):n_r + min(dr, 0)]
    if wrap:
        src = np.roll(src, -dt, axis=1)
        out[max(-dr, 0):n_r + min(-dr, 0)] = src
        return out
    if abs(dt) >= n_t:
        return out
    out[max(-dr, 0):n_r + min(-dr, 0), max(-dt, 0):n_t + min(-dt, 0)] = src[:, max(dt, 0):n_t + min(dt, 0)]
    return out


def erode(mask, radius, wrap=True):
    m = np.asarray(mask, dtype=bool)
    out = np.ones_like(m)
    for dr, dt in disk(radius):
        out &= _shift(m, dr, dt, wrap)
    return out


def dilate(mask, radius, wrap=True):
    m = np.asarray(mask, dtype=bool)
    out = np.zeros_like(m)
    for dr, dt in disk(radius):
        out |= _shift(m, dr, dt, wrap)
    return out


def binarize(prob, threshold=0.5):
    """1 where ``prob >= threshold``."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _data(mask):
    return mask.data if isinstance(mask, Mask) else np.asarray(mask)


def _rewrap(mask, out):
    return Mask(out.astype(np.uint8), mask.class_tag) if isinstance(mask, Mask) else out.astype(np.uint8)


def open_disk(mask, radius=3, wrap=True):
    """Erosion then dilation with the radius-``radius`` disk."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    m = _data(mask).astype(bool)
    return _rewrap(mask, dilate(erode(m, radius, wrap), radius, wrap))


def fill_holes(mask, connectivity=4, wrap=True):
    """Set background regions that cannot reach the first or last row to 1."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    m = _data(mask).astype(bool)
    bg = ~m
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndimage.label(bg, structure=structure)
    if n == 0:
        return _rewrap(mask, m)
    parent = np.arange(n + 1)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    if wrap and m.shape[1] > 1:
        left, right = labels[:, 0], labels[:, -1]
        pairs = [(left, right)]
        if connectivity == 8:
            pairs += [(left[:-1], right[1:]), (left[1:], right[:-1])]
        for a_col, b_col in pairs:
            for a, b in zip(a_col.tolist(), b_col.tolist()):
                if a and b:
                    ra, rb = find(a), find(b)
                    if ra != rb:
                        parent[ra] = rb
    roots = np.array([find(i) for i in range(n + 1)])
    border = set(roots[np.concatenate([labels[0], labels[-1]])].tolist()) - {roots[0]}
    outside = np.isin(roots[labels], list(border)) & bg
    return _rewrap(mask, m | (bg & ~outside))


def postprocess(prob, threshold=0.5, radius=3, connectivity=4, wrap=True):
    """binarize -> open_disk -> fill_holes."""
    m = binarize(prob, threshold)
    return fill_holes(open_disk(m, radius, wrap), connectivity, wrap)
