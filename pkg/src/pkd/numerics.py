"""Dense kernels with analytic gradients, Adam, and a finite-difference checker.

Plain ``numpy.ndarray`` is the tensor type. Everything is computed in float64;
single precision only appears at the file boundary.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


def _as2d(name, a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected rank 2, got shape {a.shape}")
    return a


def _check_conv(x, w, b, past, future):
    x = _as2d("input", x)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 3:
        raise ShapeError(f"weight: expected rank 3 (Dout x Din x K), got shape {w.shape}")
    if past < 0 or future < 0:
        raise ShapeError(f"past={past}, future={future}: extents must be >= 0")
    dout, din, K = w.shape
    if K != past + future + 1:
        raise ShapeError(f"kernel size K={K} != past + future + 1 = {past + future + 1}")
    if x.shape[0] < 1:
        raise ShapeError("input: need at least one frame (T >= 1)")
    if x.shape[1] != din:
        raise ShapeError(f"input channels Din={x.shape[1]} != weight Din={din}")
    if b.shape != (dout,):
        raise ShapeError(f"bias: expected shape ({dout},) for Dout={dout}, got {b.shape}")
    return x, w, b


def conv1d_offset(x, w, b, past, future):
    """Offset 1-D convolution over frames, zero padded at both ends.

    ``out[t] = b + sum_{j=-past..future} w[:, :, j + past] @ x[t + j]``.
    ``future=0`` gives a causal convolution.
    """
    x, w, b = _check_conv(x, w, b, past, future)
    return kernels.conv_forward(x, w, b, past, future)


def conv1d_offset_backward(x, w, dout, past, future):
    """Gradients ``(dx, dw, db)`` of :func:`conv1d_offset` given ``dout``."""
    x, w, _ = _check_conv(x, w, np.zeros(w.shape[0]), past, future)
    dout = _as2d("dout", dout)
    if dout.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"dout: expected {(x.shape[0], w.shape[0])}, got {dout.shape}")
    return kernels.conv_backward(x, w, dout, past, future)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(y, dy):
    # subgradient at 0 is 0; y is the post-activation value
    return np.where(y > 0.0, dy, 0.0)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_temp(logits, tau=1.0):
    """Row-wise ``softmax(logits / tau)``."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64) / tau))


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam, applied in place to ``params`` (a name -> array dict).

    Parameters absent from ``grads`` are left alone. A non-finite gradient
    aborts the whole step before anything is modified.
    """
    if not lr >= 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ------------------------------------------------------------ grad check


def grad_check(fn, inputs, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` must return ``(loss, grads)`` where ``grads`` is a list of
    arrays shaped like ``inputs``. The relative error per entry is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    loss, grads = fn(*inputs)
    if np.ndim(loss) != 0:
        raise ValueError(f"loss must be a scalar, got shape {np.shape(loss)}")
    worst = 0.0
    for a, g in zip(inputs, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != a.shape:
            raise ShapeError(f"analytic grad shape {g.shape} != input shape {a.shape}")
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn(*inputs)[0])
            flat[i] = orig - eps
            down = float(fn(*inputs)[0])
            flat[i] = orig
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return worst
