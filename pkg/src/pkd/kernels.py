"""Hot numeric kernels, each in a numba flavour and a vectorised numpy flavour.

The public names at the bottom dispatch on :data:`pkd._accel.USE_NUMBA`.
Both flavours are always importable so tests can compare them directly.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------- conv1d


def _im2col(x, K, past):
    # (T, K*din) with column block j holding padded rows t + j - past
    T, din = x.shape
    xp = np.zeros((T + K - 1, din))
    xp[past:past + T] = x
    return np.concatenate([xp[j:j + T] for j in range(K)], axis=1)


def conv_forward_numpy(x, w, b, past, future):
    dout, din, K = w.shape
    wf = w.transpose(0, 2, 1).reshape(dout, K * din)
    return _im2col(x, K, past) @ wf.T + b


def conv_backward_numpy(x, w, dout_, past, future):
    T = x.shape[0]
    dout, din, K = w.shape
    cols = _im2col(x, K, past)
    dw = (dout_.T @ cols).reshape(dout, K, din).transpose(0, 2, 1)
    db = dout_.sum(axis=0)
    dcols = dout_ @ w.transpose(0, 2, 1).reshape(dout, K * din)
    dxp = np.zeros((T + K - 1, din))
    for j in range(K):
        dxp[j:j + T] += dcols[:, j * din:(j + 1) * din]
    return dxp[past:past + T], np.ascontiguousarray(dw), db


@njit
def conv_forward_numba(x, w, b, past, future):
    T, din = x.shape
    dout, _, K = w.shape
    wt = np.empty((K, din, dout))
    for o in range(dout):
        for i in range(din):
            for j in range(K):
                wt[j, i, o] = w[o, i, j]
    out = np.empty((T, dout))
    for t in range(T):
        for o in range(dout):
            out[t, o] = b[o]
        for j in range(K):
            s = t + j - past
            if s < 0 or s >= T:
                continue
            for i in range(din):
                xv = x[s, i]
                if xv == 0.0:
                    continue
                for o in range(dout):
                    out[t, o] += wt[j, i, o] * xv
    return out


@njit
def conv_backward_numba(x, w, dout_, past, future):
    T, din = x.shape
    dout, _, K = w.shape
    dx = np.zeros((T, din))
    dwt = np.zeros((K, din, dout))
    db = np.zeros(dout)
    for t in range(T):
        for o in range(dout):
            db[o] += dout_[t, o]
        for j in range(K):
            s = t + j - past
            if s < 0 or s >= T:
                continue
            for i in range(din):
                acc = 0.0
                xv = x[s, i]
                for o in range(dout):
                    g = dout_[t, o]
                    dwt[j, i, o] += g * xv
                    acc += g * w[o, i, j]
                dx[s, i] += acc
    dw = np.empty((dout, din, K))
    for o in range(dout):
        for i in range(din):
            for j in range(K):
                dw[o, i, j] = dwt[j, i, o]
    return dx, dw, db


# ---------------------------------------------------- HMM windowed posterior


def hmm_forward_numpy(init, trans, lik):
    """Scaled forward pass. Returns filtered posteriors alpha[t] = p(s_t | x_0..t)."""
    T, S = lik.shape
    alpha = np.empty((T, S))
    a = init * lik[0]
    alpha[0] = a / a.sum()
    for t in range(1, T):
        a = (alpha[t - 1] @ trans) * lik[t]
        alpha[t] = a / a.sum()
    return alpha


def hmm_window_beta_numpy(trans, lik, w):
    """beta[t] proportional to p(x_{t+1}..x_{min(t+w, T-1)} | s_t), row-normalised.

    Vectorised over t: every frame's truncated backward recursion advances in
    lockstep, one step of look-ahead per iteration.
    """
    T, S = lik.shape
    beta = np.ones((T, S))
    for i in range(w, 0, -1):
        idx = np.arange(T) + i
        valid = idx < T
        if not valid.any():
            continue
        rows = np.nonzero(valid)[0]
        b = (lik[idx[rows]] * beta[rows]) @ trans.T
        beta[rows] = b / b.sum(axis=1, keepdims=True)
    return beta


@njit
def hmm_forward_numba(init, trans, lik):
    T, S = lik.shape
    alpha = np.empty((T, S))
    tot = 0.0
    for s in range(S):
        alpha[0, s] = init[s] * lik[0, s]
        tot += alpha[0, s]
    for s in range(S):
        alpha[0, s] /= tot
    for t in range(1, T):
        tot = 0.0
        for s in range(S):
            acc = 0.0
            for r in range(S):
                acc += alpha[t - 1, r] * trans[r, s]
            alpha[t, s] = acc * lik[t, s]
            tot += alpha[t, s]
        for s in range(S):
            alpha[t, s] /= tot
    return alpha


@njit
def hmm_window_beta_numba(trans, lik, w):
    T, S = lik.shape
    beta = np.ones((T, S))
    cur = np.empty(S)
    nxt = np.empty(S)
    for t in range(T):
        end = min(t + w, T - 1)
        for s in range(S):
            cur[s] = 1.0
        # walk backwards from the window end to t
        for u in range(end, t, -1):
            tot = 0.0
            for r in range(S):
                acc = 0.0
                for s in range(S):
                    acc += trans[r, s] * lik[u, s] * cur[s]
                nxt[r] = acc
                tot += acc
            for r in range(S):
                cur[r] = nxt[r] / tot
        for s in range(S):
            beta[t, s] = cur[s]
    return beta


# ------------------------------------------------------- streaming step


def flat_stream_weight(w):
    """``(dout, din, K)`` -> ``(dout, K * din)`` with taps oldest first."""
    return np.ascontiguousarray(np.transpose(w, (0, 2, 1)).reshape(w.shape[0], -1))


def stream_layer_numpy(ring, head, x_new, w, b):
    """One causal conv output for the newest frame.

    ``ring`` holds the previous ``past`` input rows, oldest at ``head``; ``w``
    is either the conv weight or its :func:`flat_stream_weight` form.
    Returns the pre-activation output row; the caller advances the ring.
    """
    if w.ndim == 3:
        w = flat_stream_weight(w)
    window = np.concatenate([ring[head:], ring[:head], x_new[None, :]], axis=0)
    return b + w @ window.ravel()


@njit
def stream_layer_numba(ring, head, x_new, w, b):
    past = ring.shape[0]
    dout, din, K = w.shape
    out = b.copy()
    for j in range(K):
        if j < past:
            row = ring[(head + j) % past]
        else:
            row = x_new
        for o in range(dout):
            acc = 0.0
            for i in range(din):
                acc += w[o, i, j] * row[i]
            out[o] += acc
    return out


# ------------------------------------------------------------- dispatch

if USE_NUMBA:
    hmm_forward = hmm_forward_numba
    stream_layer = stream_layer_numba
    stream_weights = np.ascontiguousarray
else:
    hmm_forward = hmm_forward_numpy
    stream_layer = stream_layer_numpy
    stream_weights = flat_stream_weight

# conv and the windowed beta pass are matrix products that BLAS does faster than
# the loop kernels, so they stay on numpy in both modes (benchmarks/bench_kernels.py)
hmm_window_beta = hmm_window_beta_numpy
conv_forward = conv_forward_numpy
conv_backward = conv_backward_numpy
