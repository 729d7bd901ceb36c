"""Training: Dice loss, AdamW, early stopping, transfer init, folds, voting."""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensornet.layers import NumericalError
from .tensornet.weights import load_weights

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-5
    adam_eps: float = 1e-9
    weight_decay: float = 1e-6
    l2_reg: float = 1e-6
    max_epochs: int = 600
    batch_size: int = 64
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    crop_width: int = 0  # 0 = train on full-width frames
    min_delta: float = 0.0  # improvement below this does not reset patience

    def __post_init__(self):
        for name in ("lr", "adam_eps", "max_epochs", "batch_size", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.l2_reg < 0:
            raise ValueError("weight_decay and l2_reg must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.min_delta < 0:
            raise ValueError("min_delta must be non-negative")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


# -- loss ---------------------------------------------------------------------

def dice_loss(pred, target, smooth=1e-5):
    """Soft Dice loss over every element of ``pred``.

    Returns ``(loss, grad)`` with ``grad`` the derivative wrt ``pred``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    inter = float(np.sum(pred * target, dtype=np.float64))
    denom = float(np.sum(pred, dtype=np.float64) + np.sum(target, dtype=np.float64)) + smooth
    num = 2.0 * inter + smooth
    loss = 1.0 - num / denom
    grad = -(2.0 * target * denom - num) / (denom * denom)
    return loss, grad.astype(pred.dtype, copy=False)


# -- optimiser ----------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, cfg):
    """One in-place AdamW update with decoupled weight decay."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        update = cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        decay = cfg.lr * cfg.weight_decay * p
        p -= update + decay
    return params, state


# -- early stopping -----------------------------------------------------------

class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True to stop."""

    def __init__(self, patience, max_epochs, min_delta=0.0):
        self.patience = patience
        self.max_epochs = max_epochs
        self.min_delta = min_delta
        self.best_loss = np.inf
        self.best_epoch = 0
        self.reason = None

    def update(self, epoch, loss):
        improved = loss < self.best_loss - self.min_delta
        if improved:
            self.best_loss = loss
            self.best_epoch = epoch
        if epoch - self.best_epoch >= self.patience:
            self.reason = "patience"
        elif epoch >= self.max_epochs:
            self.reason = "max_epochs"
        return improved


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    stop_reason: str = ""
    epochs_to_best: int = 0
    best_val_loss: float = float("inf")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_dice_loss", "wall_time_s"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.wall_time):
                w.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.3f}"])

    def summary(self):
        return {
            "stop_reason": self.stop_reason,
            "epochs_run": len(self.epochs),
            "epochs_to_best": self.epochs_to_best,
            "best_val_loss": self.best_val_loss,
        }


# -- fitting --------------------------------------------------------------------

def _crop_theta(images, masks, width, rng):
    n, _, w = images.shape
    starts = rng.integers(0, w, size=n)
    cols = (starts[:, None] + np.arange(width)[None, :]) % w
    idx = np.arange(n)[:, None]
    return images[idx, :, cols].transpose(0, 2, 1), masks[idx, :, cols].transpose(0, 2, 1)


def validation_loss(model, images, masks, batch_size=16):
    """Mean per-frame Dice loss with the model in eval mode."""
    probs = model.predict(images, batch_size=batch_size)
    return float(np.mean([dice_loss(p, t)[0] for p, t in zip(probs, masks)]))


def fit(model, train, val, cfg, init=None, augment=None, progress=None):
    """Train ``model`` in place and return ``(model, TrainLog)``.

    ``train`` and ``val`` are ``(images, masks)`` pairs of (N, H, W) arrays.
    ``init`` is an optional pretrained ``.fcw`` path applied via
    :func:`transfer_init`. ``augment`` is an optional
    :class:`fibcap.augment.AugmentConfig` applied to training frames only.
    The returned model holds the best-validation snapshot.
    """
    from .augment import stochastic_augment

    x_tr, y_tr = (np.asarray(a) for a in train)
    x_va, y_va = (np.asarray(a) for a in val)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("empty training or validation split")
    if init is not None:
        transfer_init(model, init)
    rng = np.random.default_rng(cfg.seed)
    model.dropout.rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    params = model.named_parameters()
    grads = model.named_grads()
    kernels = set(model.conv_kernel_names())
    state = AdamWState()
    stopper = EarlyStopping(cfg.patience, cfg.max_epochs, cfg.min_delta)
    log = TrainLog()
    best = model.copy_parameters()
    dtype = model.dtype
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(x_tr))
        xs, ys = x_tr[order], y_tr[order]
        if cfg.crop_width and cfg.crop_width < xs.shape[2]:
            xs, ys = _crop_theta(xs, ys, cfg.crop_width, rng)
        if augment is not None:
            pairs = [stochastic_augment(a, b, augment, aug_rng) for a, b in zip(xs, ys)]
            xs = np.stack([p[0] for p in pairs])
            ys = np.stack([p[1] for p in pairs])
        losses = []
        for i in range(0, len(xs), cfg.batch_size):
            xb = xs[i:i + cfg.batch_size, None].astype(dtype)
            yb = ys[i:i + cfg.batch_size, None].astype(dtype)
            model.zero_grad()
            pred = model.forward(xb, training=True)
            loss, g = dice_loss(pred, yb)
            model.backward(g)
            grads = model.named_grads()
            for name in kernels:
                grads[name] += 2.0 * cfg.l2_reg * params[name]
            adamw_step(params, grads, state, cfg)
            losses.append(loss)
        vloss = validation_loss(model, x_va, y_va)
        if stopper.update(epoch, vloss):
            best = model.copy_parameters()
        log.epochs.append(epoch)
        log.train_loss.append(float(np.mean(losses)))
        log.val_loss.append(vloss)
        log.wall_time.append(time.perf_counter() - t0)
        logger.info("epoch %d train %.4f val %.4f", epoch, log.train_loss[-1], vloss)
        if progress is not None:
            progress(epoch, log.train_loss[-1], vloss)
        if stopper.reason:
            break
    log.stop_reason = stopper.reason or "max_epochs"
    log.epochs_to_best = stopper.best_epoch
    log.best_val_loss = float(stopper.best_loss)
    model.set_parameters(best)
    return model, log


def transfer_init(model, pretrained):
    """Copy every name- and shape-matching tensor from ``pretrained``."""
    report = load_weights(model, pretrained)
    if not report.matched:
        raise ValueError(f"no layers of {pretrained} match the model (wrong architecture?)")
    logger.info("transfer: %d tensors copied, %d random-init", len(report.matched),
                len(report.randomly_initialized))
    return model, report


# -- folds and voting ---------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    seed: int
    groups: list
    folds: list  # dicts with train / val / test id lists

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def make_folds(pullback_ids, k=5, ratios=(0.6, 0.2, 0.2), seed=0):
    """Partition pullbacks (never frames) into ``k`` rotating folds.

    Fold ``i`` tests on group ``i``, validates on the next
    ``round(ratios[1] * k)`` groups, and trains on the rest.
    """
    ids = list(pullback_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("pullback ids must be unique")
    if k < 2 or len(ids) < k:
        raise ValueError(f"need at least k={k} pullbacks, got {len(ids)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    n_val = max(1, int(round(ratios[1] * k)))
    if n_val >= k - 1:
        raise ValueError("ratios leave no training groups")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    groups = [list(g) for g in np.array_split(np.array(shuffled, dtype=object), k)]
    folds = []
    for i in range(k):
        val_groups = [(i + 1 + j) % k for j in range(n_val)]
        train_groups = [g for g in range(k) if g != i and g not in val_groups]
        folds.append({
            "test": list(groups[i]),
            "val": [p for g in val_groups for p in groups[g]],
            "train": [p for g in train_groups for p in groups[g]],
        })
    return FoldPlan(k=k, seed=seed, groups=groups, folds=folds)


def plurality_vote(predictions):
    """Per-pixel majority of binary masks; even-k ties go to background."""
    preds = [np.asarray(p) for p in predictions]
    if not preds:
        raise ValueError("need at least one prediction")
    shape = preds[0].shape
    for p in preds[1:]:
        if p.shape != shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {shape}")
    votes = np.sum([p.astype(bool) for p in preds], axis=0)
    return (2 * votes > len(preds)).astype(np.uint8)
