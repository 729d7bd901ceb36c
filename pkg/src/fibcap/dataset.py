"""Pullbacks plus labels -> preprocessed (image, label) arrays keyed by pullback.

On disk a dataset directory holds ``<id>.ivp`` / ``<id>.json`` pairs and, per
pullback, a ``<id>.masks/`` directory of raw-coordinate label images named
``<TAG>_<frame:03d>.pgm``.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .phantom import generate, standard_suites
from .preprocess import preprocess_mask, preprocess_pullback
from .pullback import ClassTag, load_mask, load_pullback, save_mask, save_pullback


@dataclass
class PullbackData:
    pullback_id: str
    images: np.ndarray   # (N, depth, n_theta) float32 in [0, 1]
    masks: np.ndarray    # (N, depth, n_theta) uint8
    preproc: list        # PreprocFrame per frame (lumen / shadow kept for quantification)


def prepare_pullback(pullback, masks, depth=200):
    frames = preprocess_pullback(pullback)
    imgs = np.stack([f.data[:depth] for f in frames]).astype(np.float32)
    labs = np.stack([preprocess_mask(m, f.lumen, f.shadow).data[:depth] for m, f in zip(masks, frames)])
    return PullbackData(pullback.pullback_id, imgs, labs.astype(np.uint8), frames)


def load_suite(name, depth=200, class_tag=None, specs=None):
    """Generate, preprocess and label every pullback of a standard suite."""
    specs = standard_suites()[name] if specs is None else specs
    if class_tag is None:
        class_tag = ClassTag.CALCIFICATION if name.startswith("cal") else ClassTag.FC
    out = []
    for spec in specs:
        pb, truth = generate(spec)
        masks = truth.fc_masks if ClassTag(class_tag) is ClassTag.FC else truth.calc_masks
        out.append(prepare_pullback(pb, masks, depth))
    return out


def stack(items):
    """Concatenate frames of several pullbacks into ``(images, masks)``."""
    return (np.concatenate([d.images for d in items]), np.concatenate([d.masks for d in items]))


def mask_dir(data_dir, pullback_id):
    return Path(data_dir) / f"{pullback_id}.masks"


def save_labelled(data_dir, pullback, masks_by_tag, extra=None):
    """Write a pullback, its label images and an optional ``<id>.truth.json``."""
    data_dir = Path(data_dir)
    save_pullback(pullback, data_dir / f"{pullback.pullback_id}.ivp")
    mdir = mask_dir(data_dir, pullback.pullback_id)
    mdir.mkdir(parents=True, exist_ok=True)
    for tag, masks in masks_by_tag.items():
        for i, m in enumerate(masks):
            save_mask(m, mdir / f"{ClassTag(tag).value}_{i:03d}.pgm")
    if extra is not None:
        (data_dir / f"{pullback.pullback_id}.truth.json").write_text(json.dumps(extra))


def load_labels(data_dir, pullback_id, n_frames, class_tag=ClassTag.FC):
    tag = ClassTag(class_tag)
    mdir = mask_dir(data_dir, pullback_id)
    paths = [mdir / f"{tag.value}_{i:03d}.pgm" for i in range(n_frames)]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing label images: {missing[:3]}{' ...' if len(missing) > 3 else ''}")
    return [load_mask(p, tag) for p in paths]


def load_directory(data_dir, depth=200, class_tag=ClassTag.FC):
    """Preprocess every labelled pullback in ``data_dir`` (sorted by id)."""
    data_dir = Path(data_dir)
    paths = sorted(data_dir.glob("*.ivp"))
    if not paths:
        raise FileNotFoundError(f"no .ivp pullbacks in {data_dir}")
    out = []
    for p in paths:
        pb = load_pullback(p)
        masks = load_labels(data_dir, pb.pullback_id, pb.n_frames, class_tag)
        out.append(prepare_pullback(pb, masks, depth))
    return out


def load_data(ref, depth=200, class_tag=None):
    """``suite:<name>`` renders a phantom suite; anything else is a directory."""
    ref = str(ref)
    if ref.startswith("suite:"):
        return load_suite(ref[len("suite:"):], depth=depth, class_tag=class_tag)
    return load_directory(ref, depth=depth, class_tag=ClassTag.FC if class_tag is None else class_tag)
