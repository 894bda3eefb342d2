"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is called once first so JIT compilation is excluded.
"""
import argparse
import timeit

import numpy as np

from pkd import kernels
from pkd._accel import HAVE_NUMBA


def cases(rng):
    x = rng.normal(size=(256, 32))
    w = rng.normal(size=(64, 32, 5))
    b = rng.normal(size=64)
    g = rng.normal(size=(256, 64))
    S = 40
    trans = rng.random((S, S))
    trans /= trans.sum(1, keepdims=True)
    init = np.full(S, 1.0 / S)
    lik = rng.random((256, S))
    ring = rng.normal(size=(4, 32))
    xn = rng.normal(size=32)
    wf = kernels.flat_stream_weight(w)
    return {
        "conv_forward": (kernels.conv_forward_numpy, kernels.conv_forward_numba, (x, w, b, 4, 0)),
        "conv_backward": (kernels.conv_backward_numpy, kernels.conv_backward_numba, (x, w, g, 4, 0)),
        "hmm_forward": (kernels.hmm_forward_numpy, kernels.hmm_forward_numba, (init, trans, lik)),
        "hmm_window_beta": (kernels.hmm_window_beta_numpy, kernels.hmm_window_beta_numba, (trans, lik, 8)),
        "stream_layer": (kernels.stream_layer_numpy, kernels.stream_layer_numba, (ring, 1, xn, w, b)),
        "stream_layer (flat w)": (lambda *a: kernels.stream_layer_numpy(*a[:3], wf, a[4]),
                                  kernels.stream_layer_numba, (ring, 1, xn, w, b)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    print(f"{'kernel':22s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, (fn_np, fn_nb, a) in cases(np.random.default_rng(0)).items():
        ref, got = fn_np(*a), fn_nb(*a)
        for r, g in zip(np.atleast_1d(ref) if not isinstance(ref, tuple) else ref,
                        np.atleast_1d(got) if not isinstance(got, tuple) else got):
            assert np.allclose(r, g, rtol=1e-9, atol=1e-9), name
        t_np = min(timeit.repeat(lambda: fn_np(*a), number=args.repeat, repeat=3)) / args.repeat
        t_nb = min(timeit.repeat(lambda: fn_nb(*a), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:22s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
