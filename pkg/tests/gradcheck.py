"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

H = 1e-5
TOL = 1e-4


def numerical_grad(f, x, h=H):
    """d f / d x by central differences; ``f`` returns a scalar, ``x`` is mutated in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|).

    Entries where both magnitudes sit below ``floor`` are judged on absolute
    error instead (relative error there is dominated by round-off).
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    big = scale > floor
    rel = np.abs(a - n)[big] / scale[big]
    small = np.abs(a - n)[~big]
    worst = rel.max() if rel.size else 0.0
    if small.size and small.max() > 1e-9:
        worst = max(worst, small.max() / floor)
    return float(worst)


def check_layer(layer, x, seed=0):
    """Gradient errors for the input and every parameter of ``layer``.

    Loss is ``sum(layer(x) * R)`` for a fixed random ``R``.
    """
    rng = np.random.default_rng(seed)
    out = layer.forward(x, training=True)
    r = rng.normal(size=out.shape)
    layer.zero_grad()
    dx = layer.backward(r.copy())
    analytic = {"x": dx}
    analytic.update({k: v.copy() for k, v in layer.grads.items()})

    def loss():
        return float(np.sum(layer.forward(x, training=True) * r))

    errors = {"x": max_rel_error(dx, numerical_grad(loss, x))}
    for k, p in layer.params.items():
        errors[k] = max_rel_error(analytic[k], numerical_grad(loss, p))
    return errors
