"""Online student with auxiliary nodes, offline teachers T1..T4, and the
anticipation baseline, all built from stacked offset convolutions.

Parameters live in a plain ``dict`` of float64 arrays keyed by path. Forward
passes return a trace holding every intermediate needed by the hand-written
backward passes.
"""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import formats
from .numerics import ShapeError, conv1d_offset, conv1d_offset_backward, relu, relu_backward
from .receptive import LayerGeom
from .seeding import rng


@dataclass(frozen=True)
class ModelSpec:
    role: str  # "student" | "teacher" | "anticipation"
    input_dim: int
    num_classes: int  # M action classes; logits have M + 1 columns
    k: int = 0
    layers: int = 2
    past_extent: int = 4
    channels: int = 32
    aux_channels: Optional[int] = None  # student only; None means == channels

    def __post_init__(self):
        if self.role not in formats.ROLE_TAGS:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "teacher" and self.k < 1:
            raise ValueError(f"teacher needs k >= 1, got {self.k}")
        if self.role != "teacher" and self.k != 0:
            raise ValueError(f"{self.role} must have k = 0")
        if self.layers < 1 or self.channels < 1 or self.past_extent < 0:
            raise ValueError("layers and channels must be >= 1, past_extent >= 0")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be >= 1")
        if self.aux_channels is not None and self.aux_channels < 1:
            raise ValueError("aux_channels must be >= 1")

    @property
    def name(self):
        return {"student": "S", "teacher": f"T{self.k}", "anticipation": "A"}[self.role]

    @property
    def aux(self):
        return self.channels if self.aux_channels is None else self.aux_channels

    @property
    def has_map(self):
        return self.role != "teacher" and self.aux != self.channels

    @property
    def geoms(self):
        return [LayerGeom(self.past_extent, self.k)] * self.layers

    @property
    def feature_width(self):
        """Width of a layer's output (classifier input width for the last layer)."""
        return self.channels if self.role == "teacher" else self.channels + self.aux


def student(D, M, **kw):
    return ModelSpec("student", D, M, **kw)


def teacher(k, D, M, **kw):
    return ModelSpec("teacher", D, M, k=k, **kw)


# ---------------------------------------------------------------- params


def param_shapes(spec):
    """Ordered ``name -> shape`` for every tensor of ``spec``."""
    C, K, M1 = spec.channels, spec.past_extent + spec.k + 1, spec.num_classes + 1
    shapes = {}
    din = spec.input_dim
    if spec.role == "anticipation":
        shapes["pred.w"] = (spec.input_dim, spec.input_dim, spec.past_extent + 1)
        shapes["pred.b"] = (spec.input_dim,)
        din = 2 * spec.input_dim
    for l in range(1, spec.layers + 1):
        if spec.role == "teacher":
            shapes[f"l{l}.g.w"] = (C, din, K)
            shapes[f"l{l}.g.b"] = (C,)
        else:
            shapes[f"l{l}.h.w"] = (C, din, K)
            shapes[f"l{l}.h.b"] = (C,)
            shapes[f"l{l}.a.w"] = (spec.aux, din, K)
            shapes[f"l{l}.a.b"] = (spec.aux,)
            if spec.has_map:
                shapes[f"l{l}.map.w"] = (C, spec.aux, 1)
                shapes[f"l{l}.map.b"] = (C,)
        din = spec.feature_width
    shapes["cls.w"] = (M1, spec.feature_width)
    shapes["cls.b"] = (M1,)
    return shapes


def count_params(spec):
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def init_params(spec, seed):
    """Zero-mean normal weights scaled by ``1/sqrt(fan_in)``, zero biases."""
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng(seed, "init", spec.name, name).standard_normal(shape) / np.sqrt(fan_in)
    return params


def check_params(params, spec):
    for name, shape in param_shapes(spec).items():
        if name not in params:
            raise ShapeError(f"missing parameter {name!r} for model {spec.name}")
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"parameter {name!r}: expected {shape}, got {tuple(params[name].shape)}")


def _check_input(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input must be T x D with D={spec.input_dim}, got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("input needs at least one frame")
    return x


# ---------------------------------------------------------------- traces


@dataclass
class ForwardTrace:
    inputs: List[np.ndarray]  # input to each layer (z^{l-1} / g^{l-1})
    outputs: List[np.ndarray]  # post-relu layer output; student: [h | a]
    logits: np.ndarray
    channels: int
    mapped: List[np.ndarray] = field(default_factory=list)  # width-mapped aux nodes
    x: Optional[np.ndarray] = None
    xhat: Optional[np.ndarray] = None

    @property
    def h(self):
        return [o[:, :self.channels] for o in self.outputs]

    @property
    def a(self):
        return [o[:, self.channels:] for o in self.outputs]

    @property
    def g(self):
        return self.outputs


def _branch_weights(params, l):
    w = np.concatenate([params[f"l{l}.h.w"], params[f"l{l}.a.w"]], axis=0)
    b = np.concatenate([params[f"l{l}.h.b"], params[f"l{l}.a.b"]])
    return w, b


def _student_stack(params, spec, z):
    inputs, outputs, mapped = [], [], []
    for l in range(1, spec.layers + 1):
        w, b = _branch_weights(params, l)
        inputs.append(z)
        z = relu(conv1d_offset(z, w, b, spec.past_extent, 0))
        outputs.append(z)
        if spec.has_map:
            mapped.append(conv1d_offset(z[:, spec.channels:], params[f"l{l}.map.w"], params[f"l{l}.map.b"], 0, 0))
    logits = z @ params["cls.w"].T + params["cls.b"]
    return ForwardTrace(inputs, outputs, logits, spec.channels, mapped)


def student_forward(params, spec, x):
    """Causal forward pass: each layer is ``relu(causal_conv(z))`` for both the
    main and the auxiliary branch, concatenated along channels."""
    if spec.role != "student":
        raise ValueError(f"student_forward needs a student spec, got {spec.role}")
    check_params(params, spec)
    x = _check_input(spec, x)
    tr = _student_stack(params, spec, x)
    tr.x = x
    return tr


def teacher_forward(params, spec, x):
    if spec.role != "teacher":
        raise ValueError(f"teacher_forward needs a teacher spec, got {spec.role}")
    check_params(params, spec)
    g = _check_input(spec, x)
    inputs, outputs = [], []
    for l in range(1, spec.layers + 1):
        inputs.append(g)
        g = relu(conv1d_offset(g, params[f"l{l}.g.w"], params[f"l{l}.g.b"], spec.past_extent, spec.k))
        outputs.append(g)
    logits = g @ params["cls.w"].T + params["cls.b"]
    return ForwardTrace(inputs, outputs, logits, spec.channels, x=x)


def anticipation_forward(params, spec, x):
    """Causal predictor ``xhat`` followed by the student stack on ``[xhat | x]``."""
    if spec.role != "anticipation":
        raise ValueError(f"anticipation_forward needs an anticipation spec, got {spec.role}")
    check_params(params, spec)
    x = _check_input(spec, x)
    xhat = conv1d_offset(x, params["pred.w"], params["pred.b"], spec.past_extent, 0)
    tr = _student_stack(params, spec, np.concatenate([xhat, x], axis=1))
    tr.x, tr.xhat = x, xhat
    return tr


def forward(params, spec, x):
    return {"student": student_forward, "teacher": teacher_forward,
            "anticipation": anticipation_forward}[spec.role](params, spec, x)


def kd_features(trace, spec, layer1_source="aux"):
    """Student features compared against teacher features, one per layer.

    Non-final layers use the auxiliary nodes by default; ``layer1_source="main"``
    switches them to the main-branch features ``h``. A teacher trace returns its
    own layer outputs ``g``.
    """
    if spec.role == "teacher":
        return list(trace.g)
    feats = []
    for i in range(spec.layers):
        if i < spec.layers - 1 and layer1_source == "main":
            feats.append(trace.h[i])
        elif spec.has_map:
            feats.append(trace.mapped[i])
        else:
            feats.append(trace.a[i])
    return feats


# ---------------------------------------------------------------- backward


def student_backward(params, spec, trace, dlogits, dfeat=None, layer1_source="aux"):
    """Gradients of a loss w.r.t. every student (or anticipation) parameter.

    ``dfeat`` optionally holds per-layer gradients w.r.t. :func:`kd_features`.
    For the anticipation model ``dxhat`` (gradient reaching the predictor
    through the stack) is folded in; add the prediction-loss gradient with
    :func:`predictor_backward`.
    """
    C = spec.channels
    grads = {}
    z_last = trace.outputs[-1]
    grads["cls.w"] = dlogits.T @ z_last
    grads["cls.b"] = dlogits.sum(axis=0)
    dz = dlogits @ params["cls.w"]
    for i in range(spec.layers - 1, -1, -1):
        l = i + 1
        dz = dz.copy()
        if dfeat is not None and dfeat[i] is not None:
            if i < spec.layers - 1 and layer1_source == "main":
                dz[:, :C] += dfeat[i]
            elif spec.has_map:
                da, grads[f"l{l}.map.w"], grads[f"l{l}.map.b"] = conv1d_offset_backward(
                    trace.outputs[i][:, C:], params[f"l{l}.map.w"], dfeat[i], 0, 0)
                dz[:, C:] += da
            else:
                dz[:, C:] += dfeat[i]
        if spec.has_map and f"l{l}.map.w" not in grads:
            grads[f"l{l}.map.w"] = np.zeros_like(params[f"l{l}.map.w"])
            grads[f"l{l}.map.b"] = np.zeros_like(params[f"l{l}.map.b"])
        dpre = relu_backward(trace.outputs[i], dz)
        w, _ = _branch_weights(params, l)
        dz, dw, db = conv1d_offset_backward(trace.inputs[i], w, dpre, spec.past_extent, 0)
        grads[f"l{l}.h.w"], grads[f"l{l}.a.w"] = dw[:C], dw[C:]
        grads[f"l{l}.h.b"], grads[f"l{l}.a.b"] = db[:C], db[C:]
    if spec.role == "anticipation":
        D = spec.input_dim
        _, grads["pred.w"], grads["pred.b"] = conv1d_offset_backward(
            trace.x, params["pred.w"], dz[:, :D], spec.past_extent, 0)
    return grads, dz


def predictor_backward(params, spec, trace, dxhat, grads):
    """Accumulate a direct gradient on ``xhat`` into ``grads`` (in place)."""
    _, dw, db = conv1d_offset_backward(trace.x, params["pred.w"], dxhat, spec.past_extent, 0)
    grads["pred.w"] = grads["pred.w"] + dw
    grads["pred.b"] = grads["pred.b"] + db
    return grads


def teacher_backward(params, spec, trace, dlogits, dfeat=None):
    grads = {}
    grads["cls.w"] = dlogits.T @ trace.outputs[-1]
    grads["cls.b"] = dlogits.sum(axis=0)
    dg = dlogits @ params["cls.w"]
    for i in range(spec.layers - 1, -1, -1):
        l = i + 1
        if dfeat is not None and dfeat[i] is not None:
            dg = dg + dfeat[i]
        dpre = relu_backward(trace.outputs[i], dg)
        dg, grads[f"l{l}.g.w"], grads[f"l{l}.g.b"] = conv1d_offset_backward(
            trace.inputs[i], params[f"l{l}.g.w"], dpre, spec.past_extent, spec.k)
    return grads, dg


# ---------------------------------------------------------------- checkpoint


def round_f32(params):
    """Params rounded through single precision, as they would be after a save/load."""
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict

    def to_bytes(self):
        s = self.spec
        header = dict(role=s.role, layers=s.layers, past_extent=s.past_extent, k=s.k,
                      C=s.channels, D=s.input_dim, M=s.num_classes)
        ordered = {name: self.params[name] for name in param_shapes(s)}
        return formats.encode_checkpoint(header, ordered)

    @classmethod
    def from_bytes(cls, buf):
        header, tensors = formats.decode_checkpoint(buf)
        aux = None
        if header["role"] != "teacher":
            aux_w = tensors.get("l1.a.w")
            if aux_w is None:
                raise formats.FormatError("student checkpoint lacks l1.a.w")
            if aux_w.shape[0] != header["C"]:
                aux = int(aux_w.shape[0])
        spec = ModelSpec(header["role"], header["D"], header["M"], k=header["k"], layers=header["layers"],
                         past_extent=header["past_extent"], channels=header["C"], aux_channels=aux)
        params = {k: v.astype(np.float64) for k, v in tensors.items()}
        check_params(params, spec)
        extra = set(params) - set(param_shapes(spec))
        if extra:
            raise formats.FormatError(f"unexpected tensors {sorted(extra)}")
        return cls(spec, params)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())

    def rounded(self):
        return Checkpoint(self.spec, round_f32(self.params))

    def copy(self):
        return Checkpoint(self.spec, {k: v.copy() for k, v in self.params.items()})

    def with_spec(self, **changes):
        return Checkpoint(replace(self.spec, **changes), self.params)
