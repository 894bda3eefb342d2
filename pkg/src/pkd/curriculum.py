"""Training orchestration: single-model training, joint distillation stages,
and multi-stage distillation paths (curriculum and teacher-assistant order).
"""
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import models as mdl
from .losses import Hyper, loss_cls, loss_predict, loss_total
from .metrics import evaluate
from .numerics import AdamState, adam_step, softmax_temp
from .receptive import alignment_window
from .seeding import rng

log = logging.getLogger(__name__)


@dataclass
class TrainLog:
    stage: str
    records: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("nan")

    def add(self, **rec):
        rec = {"stage": self.stage, **rec}
        self.records.append(rec)
        log.debug("%s", rec)

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


# ---------------------------------------------------------------- helpers


def split_holdout(data, hyper):
    """Deterministic (train, holdout) index split of ``data``."""
    n = len(data)
    n_hold = int(round(n * hyper.holdout_fraction))
    if hyper.holdout_fraction > 0 and n >= 2:
        n_hold = min(max(n_hold, 1), n - 1)
    else:
        n_hold = 0
    perm = rng(hyper.seed, "holdout").permutation(n)
    return sorted(perm[n_hold:].tolist()), sorted(perm[:n_hold].tolist())


def predict_proba(ckpt, sequences):
    """Softmax class scores for every frame of ``sequences``, concatenated."""
    out = []
    for x, _ in sequences:
        out.append(softmax_temp(mdl.forward(ckpt.params, ckpt.spec, x).logits, 1.0))
    return np.concatenate(out)


def score(ckpt, data, portions=None):
    """Evaluation report of ``ckpt`` on a :class:`SequenceSet`."""
    labels = np.concatenate([y for _, y in data.sequences])
    return evaluate(predict_proba(ckpt, data.sequences), labels, portions=portions, lengths=data.lengths)


def _holdout_metric(ckpt, data, idx):
    if not idx:
        return float("nan")
    seqs = [data.sequences[i] for i in idx]
    labels = np.concatenate([y for _, y in seqs])
    if not (labels > 0).any():
        return float("nan")
    return evaluate(predict_proba(ckpt, seqs), labels).map


def _copy(params):
    return {k: v.copy() for k, v in params.items()}


class _Selector:
    """Keeps the best parameters seen on the held-out metric and decides when to stop."""

    def __init__(self, hyper, metric, snapshot):
        self.hyper = hyper
        self.best = metric
        self.best_epoch = 0
        self.snapshot = snapshot
        self.wait = 0

    def update(self, epoch, metric, snapshot_fn):
        if np.isnan(self.best) or metric > self.best + self.hyper.min_delta:
            self.best, self.best_epoch, self.wait = metric, epoch, 0
            self.snapshot = snapshot_fn()
        else:
            self.wait += 1
        return self.wait >= self.hyper.patience


def _float_seqs(data):
    return [(np.asarray(x, dtype=np.float64), y) for x, y in data.sequences]


# ---------------------------------------------------------------- single model


def _single_step(spec, params, x, y, hyper, P):
    tr = mdl.forward(params, spec, x)
    loss, dlog = loss_cls(tr.logits, y)
    parts = {"loss_cls": loss}
    if spec.role == "teacher":
        grads, _ = mdl.teacher_backward(params, spec, tr, dlog)
    else:
        grads, _ = mdl.student_backward(params, spec, tr, dlog)
    if spec.role == "anticipation":
        lp, dxhat = loss_predict(tr.xhat, tr.x, P, hyper.window_mode)
        parts["loss_predict"] = lp
        mdl.predictor_backward(params, spec, tr, hyper.predict_weight * dxhat, grads)
    return parts, grads


def train_single(spec, data, hyper, init=None, stage=None, P=None):
    """Train one model on the classification loss alone (plus the prediction
    loss for the anticipation model). Returns ``(Checkpoint, TrainLog)``.

    ``init`` resumes from an existing checkpoint instead of a fresh draw.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.D != spec.input_dim or data.M != spec.num_classes:
        raise ValueError(f"dataset (D={data.D}, M={data.M}) does not match model {spec.name} "
                         f"(D={spec.input_dim}, M={spec.num_classes})")
    if spec.role == "anticipation" and (P is None or P < 1):
        raise ValueError(f"anticipation model needs P >= 1, got {P}")
    stage = stage or f"train:{spec.name}"
    params = _copy(init.params) if init is not None else mdl.init_params(spec, hyper.seed)
    seqs = _float_seqs(data)
    tr_idx, ho_idx = split_holdout(data, hyper)
    state = AdamState()
    tlog = TrainLog(stage)
    metric0 = _holdout_metric(mdl.Checkpoint(spec, params), data, ho_idx)
    sel = _Selector(hyper, metric0, _copy(params))
    for epoch in range(1, hyper.epochs + 1):
        lr = hyper.lr_at(epoch)
        order = rng(hyper.seed, "shuffle", epoch).permutation(len(tr_idx))
        sums = {}
        for j in order:
            x, y = seqs[tr_idx[j]]
            parts, grads = _single_step(spec, params, x, y, hyper, P)
            adam_step(params, grads, state, lr)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        metric = _holdout_metric(mdl.Checkpoint(spec, params), data, ho_idx)
        n = max(len(order), 1)
        rec = {"epoch": epoch, "lr": lr, "loss_cls_s": sums.get("loss_cls", 0.0) / n,
               "loss_cls_t": None, "loss_l": None, "loss_an": None, "holdout_metric": metric}
        if "loss_predict" in sums:
            rec["loss_predict"] = sums["loss_predict"] / n
        tlog.add(**rec)
        if sel.update(epoch, metric, lambda: _copy(params)):
            break
    tlog.best_epoch, tlog.best_metric = sel.best_epoch, sel.best
    return mdl.Checkpoint(spec, sel.snapshot).rounded(), tlog


# ---------------------------------------------------------------- distillation


def _check_pair(s_spec, t_spec):
    if t_spec.role != "teacher":
        raise ValueError(f"teacher must have role teacher, got {t_spec.role}")
    if s_spec.role not in ("student", "teacher"):
        raise ValueError(f"cannot distil into a {s_spec.role} model")
    for attr in ("input_dim", "num_classes", "layers"):
        if getattr(s_spec, attr) != getattr(t_spec, attr):
            raise ValueError(f"incompatible models {s_spec.name}/{t_spec.name}: {attr} "
                             f"{getattr(s_spec, attr)} vs {getattr(t_spec, attr)}")
    if s_spec.role == "student" and s_spec.channels != t_spec.channels:
        raise ValueError(f"student C={s_spec.channels} != teacher C={t_spec.channels}")


def _distill_step(s_spec, s_params, t_spec, t_params, x, y, hyper, p):
    s_tr = mdl.forward(s_params, s_spec, x)
    t_tr = mdl.teacher_forward(t_params, t_spec, x)
    use_an = s_spec.role == "student" and hyper.alpha != 0.0
    s_feats = mdl.kd_features(s_tr, s_spec, hyper.layer1_source) if use_an else None
    total, parts, g = loss_total(s_tr, t_tr, s_feats, t_tr.g if use_an else None, y, hyper, p)
    if s_spec.role == "student":
        s_grads, _ = mdl.student_backward(s_params, s_spec, s_tr, g["d_ys"], g["d_sfeats"], hyper.layer1_source)
    else:
        s_grads, _ = mdl.teacher_backward(s_params, s_spec, s_tr, g["d_ys"])
    t_grads, _ = mdl.teacher_backward(t_params, t_spec, t_tr, g["d_yt"], g["d_tfeats"])
    return parts, s_grads, t_grads


def distill_stage(student_ckpt, teacher_ckpt, data, hyper, stage=None):
    """Jointly optimise student and teacher under the combined objective.

    Both start from the given checkpoints with fresh optimiser state. Model
    selection is on the student's held-out mAP. Returns
    ``(student', teacher', TrainLog)``.
    """
    s_spec, t_spec = student_ckpt.spec, teacher_ckpt.spec
    _check_pair(s_spec, t_spec)
    if len(data) == 0:
        raise ValueError("empty dataset")
    p = alignment_window(t_spec.k)
    stage = stage or f"{s_spec.name}<-{t_spec.name}"
    s_params, t_params = _copy(student_ckpt.params), _copy(teacher_ckpt.params)
    seqs = _float_seqs(data)
    tr_idx, ho_idx = split_holdout(data, hyper)
    s_state, t_state = AdamState(), AdamState()
    tlog = TrainLog(stage)
    metric0 = _holdout_metric(mdl.Checkpoint(s_spec, s_params), data, ho_idx)
    sel = _Selector(hyper, metric0, (_copy(s_params), _copy(t_params)))
    for epoch in range(1, hyper.epochs + 1):
        lr = hyper.lr_at(epoch)
        order = rng(hyper.seed, "shuffle", epoch).permutation(len(tr_idx))
        sums = dict.fromkeys(("loss_cls_s", "loss_cls_t", "loss_l", "loss_an"), 0.0)
        for j in order:
            x, y = seqs[tr_idx[j]]
            parts, sg, tg = _distill_step(s_spec, s_params, t_spec, t_params, x, y, hyper, p)
            adam_step(s_params, sg, s_state, lr)
            if hyper.update_teacher:
                adam_step(t_params, tg, t_state, lr)
            for k in sums:
                sums[k] += parts[k]
        metric = _holdout_metric(mdl.Checkpoint(s_spec, s_params), data, ho_idx)
        n = max(len(order), 1)
        tlog.add(epoch=epoch, lr=lr, holdout_metric=metric, **{k: v / n for k, v in sums.items()})
        if sel.update(epoch, metric, lambda: (_copy(s_params), _copy(t_params))):
            break
    tlog.best_epoch, tlog.best_metric = sel.best_epoch, sel.best
    s_best, t_best = sel.snapshot
    return (mdl.Checkpoint(s_spec, s_best).rounded(), mdl.Checkpoint(t_spec, t_best).rounded(), tlog)


# ---------------------------------------------------------------- paths

_TOKEN = re.compile(r"S|T([1-9][0-9]*)")


@dataclass(frozen=True)
class KdPath:
    models: tuple
    direction: str  # "curriculum" | "takd"

    def __str__(self):
        return ">".join(self.models)


def parse_path(text):
    """Parse ``"S>T1>T2"`` (curriculum) or ``"T4>T2>S"`` (teacher-assistant order)."""
    tokens, pos = [], 0
    for part in text.split(">"):
        stripped = part.strip()
        col = pos + (len(part) - len(part.lstrip()))
        m = _TOKEN.fullmatch(stripped)
        if not m or (m.group(1) and not 1 <= int(m.group(1)) <= 4):
            raise ValueError(f"bad model name {stripped!r} at position {col} in path {text!r} (expected S or T1..T4)")
        if stripped in tokens:
            raise ValueError(f"model {stripped} repeated at position {col} in path {text!r}")
        tokens.append(stripped)
        pos += len(part) + 1
    if len(tokens) < 2:
        raise ValueError(f"path {text!r} needs at least two models")
    if "S" not in tokens:
        raise ValueError(f"path {text!r} does not contain the student S")
    if tokens[0] == "S":
        return KdPath(tuple(tokens), "curriculum")
    if tokens[-1] == "S":
        return KdPath(tuple(tokens), "takd")
    col = text.index("S")
    raise ValueError(f"S at position {col} in path {text!r}: the student must be first (curriculum) or last (takd)")


def spec_for(name, D, M, **kw):
    m = _TOKEN.fullmatch(str(name).strip())
    if not m or (m.group(1) and not 1 <= int(m.group(1)) <= 4):
        raise ValueError(f"unknown model {name!r} (expected S or T1..T4)")
    name = m.group(0)
    if name == "S":
        return mdl.student(D, M, **kw)
    kw.pop("aux_channels", None)
    return mdl.teacher(int(name[1:]), D, M, **kw)


def ensure_pretrained(names, data, hyper, pretrained=None, spec_kw=None):
    """Checkpoints for ``names``, training any that are missing on the classification loss."""
    pretrained = {} if pretrained is None else pretrained
    logs = []
    for name in names:
        if name not in pretrained:
            ck, tl = train_single(spec_for(name, data.D, data.M, **(spec_kw or {})), data, hyper)
            pretrained[name] = ck
            logs.append(tl)
    return pretrained, logs


def run_path(path, data, hyper, pretrained=None, spec_kw=None, stage_hypers=None):
    """Execute a distillation path. Returns ``(final student checkpoint, logs)``.

    Curriculum: the student is carried stage to stage while each teacher is
    loaded fresh from its pretrained checkpoint. TAKD order: each link's
    student product becomes the next link's teacher.
    """
    if isinstance(path, str):
        path = parse_path(path)
    pretrained, logs = ensure_pretrained(path.models, data, hyper, pretrained, spec_kw)
    stage_hypers = stage_hypers or {}
    if path.direction == "curriculum":
        current = pretrained["S"]
        for name in path.models[1:]:
            stage = f"{path}:S<-{name}"
            current, _, tl = distill_stage(current, pretrained[name], data, stage_hypers.get(name, hyper), stage)
            logs.append(tl)
        return current, logs
    teacher = pretrained[path.models[0]]
    for name in path.models[1:]:
        stage = f"{path}:{name}<-{teacher.spec.name}"
        student = pretrained[name]
        product, _, tl = distill_stage(student, teacher, data, stage_hypers.get(name, hyper), stage)
        logs.append(tl)
        teacher = product
    return teacher, logs


def gap_reduction(baseline, distilled, teacher):
    """Share (percent) of the baseline-to-teacher gap closed by distillation."""
    if not teacher > baseline:
        raise ValueError(f"teacher score {teacher} must exceed baseline {baseline}")
    return 100.0 * (distilled - baseline) / (teacher - baseline)
