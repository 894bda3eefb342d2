import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pkd import models as mdl
from pkd.losses import (Hyper, combine, future_window_mean, loss_an, loss_cls, loss_logit_kd, loss_predict,
                        loss_total)
from pkd.numerics import ShapeError, grad_check


def lsm(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- classification


def test_cls_saturated_and_uniform():
    y = np.array([0, 2, 1, 3])
    z = np.zeros((4, 4))
    z[np.arange(4), y] = 1e3
    assert loss_cls(z, y)[0] <= 1e-6
    assert math.isclose(loss_cls(np.zeros((4, 4)), y)[0], math.log(4), rel_tol=1e-12)


def test_cls_hand_value():
    z = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]])
    y = np.array([0, 0, 1])
    hand = (-math.log(math.e / (math.e + 1)) - math.log(1 / (1 + math.e ** 2))
            - math.log(math.e / (math.e + math.exp(-1)))) / 3
    assert math.isclose(loss_cls(z, y)[0], hand, rel_tol=1e-12)


def test_cls_rejects_bad_labels():
    with pytest.raises(ValueError):
        loss_cls(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ShapeError):
        loss_cls(np.zeros((2, 3)), np.array([0]))


def test_cls_grad(r):
    y = r.integers(0, 4, 6)
    assert grad_check(lambda z: (lambda l, d: (l, [d]))(*loss_cls(z, y)), [r.standard_normal((6, 4))]) <= 1e-8


# ---------------------------------------------------------------- logit KD


def test_kd_identical_is_zero(r):
    z = r.standard_normal((5, 4))
    assert abs(loss_logit_kd(z, z, 5.0)[0]) < 1e-15


def test_kd_to_uniform_teacher_closed_form(r):
    tau, K = 3.0, 5
    ys = r.standard_normal((6, K)) * 4
    direct = tau ** 2 * np.mean(-math.log(K) - lsm(ys / tau).mean(axis=1))
    assert math.isclose(loss_logit_kd(ys, np.zeros((6, K)), tau)[0], direct, rel_tol=1e-12)


def test_kd_two_class_hand_value():
    # P = softmax([1, 0]), Q = softmax([0, 1]); KL = (e - 1) / (e + 1)
    val = loss_logit_kd(np.array([[0.0, 5.0]]), np.array([[5.0, 0.0]]), 5.0)[0]
    assert math.isclose(val, 25 * (math.e - 1) / (math.e + 1), rel_tol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.2, 10))
def test_kd_nonnegative_and_shift_invariant(seed, tau):
    r = np.random.default_rng(seed)
    ys, yt = r.normal(0, 3, (4, 5)), r.normal(0, 3, (4, 5))
    v = loss_logit_kd(ys, yt, tau)[0]
    assert v >= -1e-12
    shifted = loss_logit_kd(ys + r.normal(0, 10, (4, 1)), yt + r.normal(0, 10, (4, 1)), tau)[0]
    assert math.isclose(v, shifted, rel_tol=1e-9, abs_tol=1e-12)


@pytest.mark.parametrize("target", ["teacher", "student"])
def test_kd_grads_reach_both_models(target, r):
    def fn(ys, yt):
        v, ds, dt = loss_logit_kd(ys, yt, 2.5, target)
        return v, [ds, dt]
    ys, yt = r.standard_normal((5, 3)), r.standard_normal((5, 3))
    assert grad_check(fn, [ys, yt]) <= 1e-8
    assert np.abs(fn(ys, yt)[1][1]).max() > 0


def test_kd_target_flag_swaps_direction(r):
    ys, yt = r.standard_normal((3, 4)), r.standard_normal((3, 4))
    assert math.isclose(loss_logit_kd(ys, yt, 2.0, "student")[0], loss_logit_kd(yt, ys, 2.0)[0], rel_tol=1e-12)


def test_kd_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_logit_kd(np.zeros((2, 3)), np.zeros((2, 4)), 1.0)


# ---------------------------------------------------------------- auxiliary nodes


def window_oracle(g, p, t):
    T = g.shape[0]
    acc = np.zeros(g.shape[1])
    for i in range(p + 1):
        if t + i < T:
            acc += g[t + i]
    return acc / (p + 1)


def an_oracle(a_list, g_list, p):
    L = len(a_list)
    T = a_list[0].shape[0]
    total = 0.0
    for l, (a, g) in enumerate(zip(a_list, g_list)):
        for t in range(T):
            tgt = g[t] if l == L - 1 else window_oracle(g, p, t)
            total += np.mean((a[t] - tgt) ** 2) / T
    return total


def test_an_matches_loop_oracle(r):
    a = [r.standard_normal((6, 2)) for _ in range(2)]
    g = [r.standard_normal((6, 2)) for _ in range(2)]
    assert math.isclose(loss_an(a, g, 2)[0], an_oracle(a, g, 2), rel_tol=1e-12)


def test_an_zero_and_p0(r):
    g = [r.standard_normal((5, 3)) for _ in range(2)]
    assert loss_an(g, g, 0)[0] == 0.0
    a = [r.standard_normal((5, 3)) for _ in range(2)]
    plain = sum(np.mean((x - y) ** 2) for x, y in zip(a, g))
    assert math.isclose(loss_an(a, g, 0)[0], plain, rel_tol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.0, 5.0))
def test_an_scales_quadratically(seed, s):
    r = np.random.default_rng(seed)
    a = [r.standard_normal((4, 2)) for _ in range(2)]
    g = [r.standard_normal((4, 2)) for _ in range(2)]
    # p = 0 keeps every layer frame-aligned so the scaling is exact
    base = loss_an(a, g, 0)[0]
    scaled = loss_an([y + s * (x - y) for x, y in zip(a, g)], g, 0)[0]
    assert math.isclose(scaled, s * s * base, rel_tol=1e-9, abs_tol=1e-12)
    assert base >= 0


@pytest.mark.parametrize("mode", ["pad", "clip"])
def test_an_grads(mode, r):
    shapes = [(6, 2), (6, 2)]

    def fn(a1, a2, g1, g2):
        v, da, dg = loss_an([a1, a2], [g1, g2], 2, mode)
        return v, da + dg
    assert grad_check(fn, [r.standard_normal(s) for s in shapes * 2]) <= 1e-8


def test_clip_mode_averages_available_rows(r):
    g = r.standard_normal((5, 2))
    m, _ = future_window_mean(g, 3, "clip")
    np.testing.assert_allclose(m[3], g[3:5].mean(axis=0))
    m, _ = future_window_mean(g, 3, "pad")
    np.testing.assert_allclose(m[3], g[3:5].sum(axis=0) / 4)


def test_an_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        loss_an([np.zeros((3, 2))], [np.zeros((3, 4))], 1)


# ---------------------------------------------------------------- joint loss


def test_combine_arithmetic():
    assert math.isclose(combine(1.0, 2.0, 0.5, 10.0, 0.4, 0.01), 3.3, rel_tol=1e-12)


def _pair(r, aux=None, k=2):
    s_spec = mdl.student(3, 2, channels=3, aux_channels=aux)
    t_spec = mdl.teacher(k, 3, 2, channels=3)
    sp, tp = mdl.init_params(s_spec, 1), mdl.init_params(t_spec, 2)
    for p in (sp, tp):
        for name in p:
            if name.endswith(".b"):
                p[name] = r.normal(0, 0.3, p[name].shape)
    return s_spec, sp, t_spec, tp


def _total(s_spec, t_spec, x, y, hyper, p):
    s_names = list(mdl.param_shapes(s_spec))
    t_names = list(mdl.param_shapes(t_spec))

    def fn(*arrays):
        sp = dict(zip(s_names, arrays[:len(s_names)]))
        tp = dict(zip(t_names, arrays[len(s_names):]))
        s_tr = mdl.student_forward(sp, s_spec, x)
        t_tr = mdl.teacher_forward(tp, t_spec, x)
        feats = mdl.kd_features(s_tr, s_spec, hyper.layer1_source)
        total, parts, g = loss_total(s_tr, t_tr, feats, t_tr.g, y, hyper, p)
        sg, _ = mdl.student_backward(sp, s_spec, s_tr, g["d_ys"], g["d_sfeats"], hyper.layer1_source)
        tg, _ = mdl.teacher_backward(tp, t_spec, t_tr, g["d_yt"], g["d_tfeats"])
        return total, [sg[n] for n in s_names] + [tg[n] for n in t_names]
    return fn, s_names, t_names


def test_total_decouples_at_zero_weights(r):
    s_spec, sp, t_spec, tp = _pair(r)
    x, y = r.standard_normal((8, 3)), r.integers(0, 3, 8)
    s_tr, t_tr = mdl.student_forward(sp, s_spec, x), mdl.teacher_forward(tp, t_spec, x)
    h = Hyper(lam=0.0, alpha=0.0)
    total, parts, _ = loss_total(s_tr, t_tr, mdl.kd_features(s_tr, s_spec), t_tr.g, y, h, 2)
    assert total == loss_cls(s_tr.logits, y)[0] + loss_cls(t_tr.logits, y)[0]


def test_total_is_linear_in_weights(r):
    s_spec, sp, t_spec, tp = _pair(r)
    x, y = r.standard_normal((8, 3)), r.integers(0, 3, 8)
    s_tr, t_tr = mdl.student_forward(sp, s_spec, x), mdl.teacher_forward(tp, t_spec, x)
    feats = mdl.kd_features(s_tr, s_spec)
    val = lambda lam, al: loss_total(s_tr, t_tr, feats, t_tr.g, y, Hyper(lam=lam, alpha=al), 2)[0]
    _, parts, _ = loss_total(s_tr, t_tr, feats, t_tr.g, y, Hyper(lam=1.0, alpha=1.0), 2)
    assert math.isclose(val(1.5, 0.2) - val(0.5, 0.2), parts["loss_l"], rel_tol=1e-9)
    assert math.isclose(val(0.5, 1.2) - val(0.5, 0.2), parts["loss_an"], rel_tol=1e-9)


@pytest.mark.parametrize("aux,source,mode,k", [(None, "aux", "pad", 2), (2, "aux", "clip", 1),
                                               (None, "main", "pad", 4)])
def test_total_grad_check(aux, source, mode, k, r):
    s_spec, sp, t_spec, tp = _pair(r, aux, k)
    x, y = r.standard_normal((12, 3)), r.integers(0, 3, 12)
    h = Hyper(lam=0.7, alpha=0.3, tau=2.0, layer1_source=source, window_mode=mode)
    fn, sn, tn = _total(s_spec, t_spec, x, y, h, k)
    assert grad_check(fn, [sp[n] for n in sn] + [tp[n] for n in tn], eps=1e-4) <= 1e-4


# ---------------------------------------------------------------- prediction


def predict_oracle(xh, x, P):
    T, D = x.shape
    tot = 0.0
    for t in range(T):
        tgt = np.zeros(D)
        for i in range(1, P + 1):
            if t + i < T:
                tgt += x[t + i]
        tot += np.mean((xh[t] - tgt / P) ** 2)
    return tot / T


def test_predict_loop_oracle(r):
    x, xh = r.standard_normal((5, 2)), r.standard_normal((5, 2))
    assert math.isclose(loss_predict(xh, x, 3)[0], predict_oracle(xh, x, 3), rel_tol=1e-12)


def test_predict_p1_and_constant(r):
    x, xh = r.standard_normal((6, 2)), r.standard_normal((6, 2))
    nxt = np.vstack([x[1:], np.zeros((1, 2))])
    assert math.isclose(loss_predict(xh, x, 1)[0], np.mean((xh - nxt) ** 2), rel_tol=1e-12)
    c = np.full((9, 3), 2.0)
    v, d = loss_predict(c, c, 3)
    # only the last P frames (zero-padded targets) contribute
    assert math.isclose(v, predict_oracle(c, c, 3), rel_tol=1e-12)
    assert not d[:6].any()


def test_predict_grad_and_validation(r):
    x = r.standard_normal((7, 2))
    assert grad_check(lambda xh: (lambda v, d: (v, [d]))(*loss_predict(xh, x, 2)), [r.standard_normal((7, 2))]) <= 1e-8
    with pytest.raises(ValueError):
        loss_predict(x, x, 0)


# ---------------------------------------------------------------- hyper


def test_hyper_defaults_and_schedule():
    h = Hyper()
    assert (h.tau, h.lam, h.alpha, h.lr, h.lr_decay_epoch, h.lr_decay_factor, h.epochs) == \
        (5.0, 0.4, 0.01, 5e-4, 30, 0.1, 40)
    assert h.lr_at(29) == 5e-4
    assert math.isclose(h.lr_at(30), 5e-5)


@pytest.mark.parametrize("bad", [dict(tau=0), dict(epochs=0), dict(lr_decay_factor=0), dict(lr=-1),
                                 dict(kd_target="x"), dict(window_mode="x"), dict(layer1_source="x")])
def test_hyper_validation(bad):
    with pytest.raises(ValueError):
        Hyper(**bad)


def test_hyper_dict_round_trip():
    h = Hyper(lam=2.0, seed=4)
    assert Hyper.from_dict(h.to_dict()) == h
    with pytest.raises(ValueError, match="unknown"):
        Hyper.from_dict({"lambda": 1})
