"""Training objectives and their analytic gradients.

Every loss returns ``(value, grads...)``; gradients are w.r.t. the array
arguments in order. Per-frame means divide by the number of frames ``T``.
"""
from dataclasses import asdict, dataclass, fields

import numpy as np

from .numerics import ShapeError, log_softmax


@dataclass
class Hyper:
    tau: float = 5.0
    lam: float = 0.4
    alpha: float = 0.01
    lr: float = 5e-4
    lr_decay_epoch: int = 30
    lr_decay_factor: float = 0.1
    epochs: int = 40
    seed: int = 0
    # model selection / early stopping on the held-out split
    holdout_fraction: float = 0.2
    patience: int = 5
    min_delta: float = 0.05
    # interpretation switches
    kd_target: str = "teacher"  # which softened distribution is the KL target
    window_mode: str = "pad"  # "pad" (zero numerator, fixed divisor) or "clip"
    layer1_source: str = "aux"  # student feature for non-final-layer KD: "aux" | "main"
    predict_weight: float = 1.0
    update_teacher: bool = True  # joint optimisation; False freezes the teacher

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.kd_target not in ("teacher", "student"):
            raise ValueError(f"kd_target must be 'teacher' or 'student', got {self.kd_target!r}")
        if self.window_mode not in ("pad", "clip"):
            raise ValueError(f"window_mode must be 'pad' or 'clip', got {self.window_mode!r}")
        if self.layer1_source not in ("aux", "main"):
            raise ValueError(f"layer1_source must be 'aux' or 'main', got {self.layer1_source!r}")

    def lr_at(self, epoch):
        """Learning rate for 1-based ``epoch``."""
        if epoch >= self.lr_decay_epoch:
            return self.lr * self.lr_decay_factor
        return self.lr

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ------------------------------------------------------------ classification


def loss_cls(logits, labels):
    """Mean per-frame cross-entropy. Returns ``(loss, dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    T, K = logits.shape
    if labels.shape != (T,):
        raise ShapeError(f"labels: expected shape ({T},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must lie in [0, {K - 1}]")
    lsm = log_softmax(logits)
    rows = np.arange(T)
    loss = -lsm[rows, labels].mean()
    d = np.exp(lsm)
    d[rows, labels] -= 1.0
    return loss, d / T


# ------------------------------------------------------------ logit KD


def loss_logit_kd(y_s, y_t, tau, target="teacher"):
    """``(1/T) sum_t tau^2 KL(P_t || Q_t)`` on temperature-softened rows.

    With ``target="teacher"`` the teacher's distribution is ``P``. Both inputs
    receive gradients. Returns ``(loss, d_ys, d_yt)``.
    """
    y_s = np.asarray(y_s, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    _check_same(y_s, y_t, "student/teacher logits")
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    T = y_s.shape[0]
    if target == "teacher":
        loss, d_pred, d_tgt = _kl_rows(y_s / tau, y_t / tau)
        d_s, d_t = d_pred, d_tgt
    else:
        loss, d_pred, d_tgt = _kl_rows(y_t / tau, y_s / tau)
        d_s, d_t = d_tgt, d_pred
    scale = tau * tau / T
    return scale * loss, d_s * (scale / tau), d_t * (scale / tau)


def _kl_rows(u_pred, u_tgt):
    """Sum over rows of KL(softmax(u_tgt) || softmax(u_pred)) and its grads
    w.r.t. ``u_pred`` and ``u_tgt``."""
    lp = log_softmax(u_tgt)
    lq = log_softmax(u_pred)
    p = np.exp(lp)
    q = np.exp(lq)
    r = lp - lq
    kl = (p * r).sum(axis=1)
    d_pred = q - p
    d_tgt = p * (r - kl[:, None])
    return kl.sum(), d_pred, d_tgt


# ------------------------------------------------------------ windows


def future_window_mean(g, p, mode="pad", start=0):
    """Row ``t`` is the mean of ``g[t + start .. t + p]``.

    ``mode="pad"`` treats rows past the end as zero and divides by the full
    window length; ``mode="clip"`` averages only the rows that exist (rows with
    none available come out zero).
    """
    T = g.shape[0]
    n = p - start + 1
    out = np.zeros_like(g)
    counts = np.zeros(T)
    for i in range(start, p + 1):
        if i >= T:
            break
        out[:T - i] += g[i:]
        counts[:T - i] += 1
    if mode == "pad":
        return out / n, np.full(T, float(n))
    safe = np.maximum(counts, 1)
    return out / safe[:, None], np.where(counts > 0, counts, np.inf)


def _window_mean_backward(d_out, p, divisors, start=0):
    T = d_out.shape[0]
    scaled = d_out / divisors[:, None]
    dg = np.zeros_like(d_out)
    for i in range(start, p + 1):
        if i >= T:
            break
        dg[i:] += scaled[:T - i]
    return dg


# ------------------------------------------------------------ auxiliary nodes


def loss_an(student_feats, teacher_feats, p, mode="pad"):
    """Auxiliary-node distillation.

    The final layer is matched frame by frame; every earlier layer is matched
    against the mean of the teacher features over ``[t, t + p]``. Each term is a
    per-frame mean squared error over channels. Returns
    ``(loss, d_student_feats, d_teacher_feats)`` (lists, one entry per layer).
    """
    if p < 0:
        raise ValueError(f"p must be >= 0, got {p}")
    if len(student_feats) != len(teacher_feats):
        raise ShapeError(f"layer count mismatch: {len(student_feats)} vs {len(teacher_feats)}")
    L = len(student_feats)
    total = 0.0
    d_s, d_t = [], []
    for i, (a, g) in enumerate(zip(student_feats, teacher_feats)):
        if a.shape[1] != g.shape[1]:
            raise ShapeError(f"layer {i + 1}: student has {a.shape[1]} channels, teacher has {g.shape[1]}")
        _check_same(a, g, f"layer {i + 1} features")
        T, C = a.shape
        if i == L - 1:
            target, divisors = g, None
        else:
            target, divisors = future_window_mean(g, p, mode)
        diff = a - target
        total += (diff * diff).sum() / (T * C)
        da = diff * (2.0 / (T * C))
        d_s.append(da)
        d_t.append(-da if divisors is None else _window_mean_backward(-da, p, divisors))
    return total, d_s, d_t


# ------------------------------------------------------------ joint loss


def combine(cls_s, cls_t, kd_logit, kd_an, lam, alpha):
    return cls_s + cls_t + lam * kd_logit + alpha * kd_an


def loss_total(s_trace, t_trace, s_feats, t_feats, labels, hyper, p):
    """Joint objective for one student/teacher pair on one sequence.

    Returns ``(total, parts, grads)`` where ``parts`` names the four terms and
    ``grads`` holds ``d_ys, d_yt, d_sfeats, d_tfeats``.
    """
    cs, d_ys = loss_cls(s_trace.logits, labels)
    ct, d_yt = loss_cls(t_trace.logits, labels)
    parts = {"loss_cls_s": cs, "loss_cls_t": ct, "loss_l": 0.0, "loss_an": 0.0}
    d_sf = d_tf = None
    if hyper.lam != 0.0:
        kl, dks, dkt = loss_logit_kd(s_trace.logits, t_trace.logits, hyper.tau, hyper.kd_target)
        parts["loss_l"] = kl
        d_ys = d_ys + hyper.lam * dks
        d_yt = d_yt + hyper.lam * dkt
    if hyper.alpha != 0.0 and s_feats is not None:
        an, dsf, dtf = loss_an(s_feats, t_feats, p, hyper.window_mode)
        parts["loss_an"] = an
        d_sf = [hyper.alpha * d for d in dsf]
        d_tf = [hyper.alpha * d for d in dtf]
    total = combine(parts["loss_cls_s"], parts["loss_cls_t"], parts["loss_l"], parts["loss_an"],
                    hyper.lam, hyper.alpha)
    return total, parts, {"d_ys": d_ys, "d_yt": d_yt, "d_sfeats": d_sf, "d_tfeats": d_tf}


# ------------------------------------------------------------ anticipation


def loss_predict(x_hat, x, P, mode="pad"):
    """Mean over frames of the squared error between ``x_hat[t]`` and the mean of
    ``x[t+1 .. t+P]`` (per-frame mean over feature dims). Returns
    ``(loss, d_xhat)``; the target is treated as data."""
    if P < 1:
        raise ValueError(f"P must be >= 1, got {P}")
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_same(x_hat, x, "prediction/input")
    T, D = x.shape
    target, divisors = future_window_mean(x, P, mode, start=1)
    valid = np.isfinite(divisors)
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(x_hat)
    diff = (x_hat - target) * valid[:, None]
    return (diff * diff).sum() / (n * D), diff * (2.0 / (n * D))
