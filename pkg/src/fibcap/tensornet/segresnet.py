"""SegResNet-style encoder/decoder built from the layers in :mod:`layers`.

Encoder: initial 3x3 conv, spatial dropout, then per level an optional
strided 3x3 conv (doubling filters) followed by ``blocks_down[level]``
residual blocks. Decoder: per level a 1x1 conv halving filters, bilinear x2
upsampling, crop to the skip size, additive skip, one residual block.
Head: group norm, ReLU, 1x1 conv to one channel, sigmoid.
"""

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    BilinearUpsample,
    Conv2d,
    GroupNorm,
    ReLU,
    ResBlock,
    Sigmoid,
    SpatialDropout,
    check_finite,
)


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int = 1
    init_filters: int = 16
    levels: int = 4
    dropout: float = 0.2
    groups: int = 8
    blocks_down: tuple = field(default=(2, 2, 2, 2))

    def filters(self, level):
        return self.init_filters * 2 ** level

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "init_filters": self.init_filters,
            "levels": self.levels,
            "dropout": self.dropout,
            "groups": self.groups,
            "blocks_down": list(self.blocks_down),
        }


class SegModel:
    """Trainable network. Call :meth:`forward` then :meth:`backward`."""

    def __init__(self, spec, seed=0, dtype=np.float32):
        if spec.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(spec.blocks_down) < spec.levels:
            raise ValueError("blocks_down needs one entry per level")
        if spec.init_filters % spec.groups:
            raise ValueError("init_filters must be divisible by groups")
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.rng = rng
        self.init_conv = Conv2d(spec.in_channels, spec.init_filters, 3, rng=rng, dtype=dtype)
        self.dropout = SpatialDropout(spec.dropout, rng=np.random.default_rng(rng.integers(2**63)))
        self.down = {}
        self.enc_blocks = {}
        for lvl in range(spec.levels):
            f = spec.filters(lvl)
            if lvl > 0:
                self.down[lvl] = Conv2d(spec.filters(lvl - 1), f, 3, stride=2, rng=rng, dtype=dtype)
            self.enc_blocks[lvl] = [ResBlock(f, spec.groups, rng=rng, dtype=dtype)
                                    for _ in range(spec.blocks_down[lvl])]
        self.proj = {}
        self.up = {}
        self.dec_blocks = {}
        for lvl in range(spec.levels - 2, -1, -1):
            f = spec.filters(lvl)
            self.proj[lvl] = Conv2d(spec.filters(lvl + 1), f, 1, rng=rng, dtype=dtype)
            self.up[lvl] = BilinearUpsample()
            self.dec_blocks[lvl] = ResBlock(f, spec.groups, rng=rng, dtype=dtype)
        self.head_norm = GroupNorm(spec.init_filters, spec.groups, dtype=dtype)
        self.head_relu = ReLU()
        self.head_conv = Conv2d(spec.init_filters, 1, 1, rng=rng, dtype=dtype)
        self.sigmoid = Sigmoid()
        self.feature_shapes = []

    # -- parameter access -------------------------------------------------

    def layers(self):
        """Ordered mapping of layer name to parametrised layer."""
        out = {"init.conv": self.init_conv}
        for lvl in range(self.spec.levels):
            if lvl in self.down:
                out[f"enc{lvl}.down"] = self.down[lvl]
            for j, blk in enumerate(self.enc_blocks[lvl]):
                for sub, layer in blk.sublayers().items():
                    out[f"enc{lvl}.block{j}.{sub}"] = layer
        for lvl in range(self.spec.levels - 2, -1, -1):
            out[f"dec{lvl}.proj"] = self.proj[lvl]
            for sub, layer in self.dec_blocks[lvl].sublayers().items():
                out[f"dec{lvl}.block0.{sub}"] = layer
        out["head.norm"] = self.head_norm
        out["head.conv"] = self.head_conv
        return out

    def named_parameters(self):
        return {f"{lname}.{k}": v for lname, layer in self.layers().items() for k, v in layer.params.items()}

    def named_grads(self):
        return {f"{lname}.{k}": v for lname, layer in self.layers().items() for k, v in layer.grads.items()}

    def zero_grad(self):
        for layer in self.layers().values():
            layer.zero_grad()

    def conv_kernel_names(self):
        return [f"{n}.weight" for n, layer in self.layers().items() if isinstance(layer, Conv2d)]

    def copy_parameters(self):
        return {k: v.copy() for k, v in self.named_parameters().items()}

    def set_parameters(self, values):
        params = self.named_parameters()
        for k, v in values.items():
            params[k][...] = v

    # -- passes -------------------------------------------------------------

    def forward(self, x, training=False):
        """Map (B, C, H, W) inputs to (B, 1, H, W) probabilities."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4:
            raise ValueError("expected a (B, C, H, W) batch")
        h = self.init_conv.forward(x, training)
        h = self.dropout.forward(h, training)
        skips = {}
        self.feature_shapes = []
        for lvl in range(self.spec.levels):
            if lvl > 0:
                h = self.down[lvl].forward(h, training)
            for blk in self.enc_blocks[lvl]:
                h = blk.forward(h, training)
            skips[lvl] = h
            self.feature_shapes.append(h.shape[1:])
        self._skip_shapes = {lvl: s.shape for lvl, s in skips.items()}
        self._up_shapes = {}
        for lvl in range(self.spec.levels - 2, -1, -1):
            h = self.proj[lvl].forward(h, training)
            h = self.up[lvl].forward(h, training)
            self._up_shapes[lvl] = h.shape
            th, tw = skips[lvl].shape[2:]
            h = h[:, :, :th, :tw] + skips[lvl]
            h = self.dec_blocks[lvl].forward(h, training)
        h = self.head_norm.forward(h, training)
        h = self.head_relu.forward(h, training)
        h = self.head_conv.forward(h, training)
        out = self.sigmoid.forward(h, training)
        return check_finite(out, "forward")

    def backward(self, grad):
        """Accumulate parameter gradients; return gradient wrt the input."""
        g = self.sigmoid.backward(grad)
        g = self.head_conv.backward(g)
        g = self.head_relu.backward(g)
        g = self.head_norm.backward(g)
        skip_grads = {}
        for lvl in range(self.spec.levels - 1):
            g = self.dec_blocks[lvl].backward(g)
            skip_grads[lvl] = g
            full = np.zeros(self._up_shapes[lvl], dtype=g.dtype)
            full[:, :, :g.shape[2], :g.shape[3]] = g
            g = self.up[lvl].backward(full)
            g = self.proj[lvl].backward(g)
        for lvl in range(self.spec.levels - 1, -1, -1):
            if lvl in skip_grads:
                g = g + skip_grads[lvl]
            for blk in reversed(self.enc_blocks[lvl]):
                g = blk.backward(g)
            if lvl > 0:
                g = self.down[lvl].backward(g)
        g = self.dropout.backward(g)
        g = self.init_conv.backward(g)
        for name, gr in self.named_grads().items():
            check_finite(gr, f"backward ({name})")
        return g

    def predict(self, x, batch_size=8):
        """Eval-mode forward in chunks; returns (N, H, W) probabilities."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        outs = [self.forward(x[i:i + batch_size], training=False)[:, 0] for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)


def build_segresnet(in_channels=1, init_filters=16, levels=4, dropout=0.2, groups=8,
                    blocks_down=None, seed=0, dtype=np.float32):
    if blocks_down is None:
        blocks_down = (2,) * levels
    spec = ModelSpec(in_channels, init_filters, levels, dropout, groups, tuple(blocks_down))
    return SegModel(spec, seed=seed, dtype=dtype)
