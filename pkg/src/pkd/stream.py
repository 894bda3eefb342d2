"""Frame-by-frame inference for the online student.

Each layer keeps a ring buffer with the last ``past_extent`` rows of its input.
The buffers start zeroed, which reproduces the zero padding the batch forward
pass applies before the first frame, so streamed logits equal the batch ones.
"""
import numpy as np

from . import kernels
from .models import Checkpoint, check_params


class StreamSession:
    def __init__(self, checkpoint):
        spec = checkpoint.spec
        if spec.role != "student":
            raise ValueError(f"streaming needs a student checkpoint, got role {spec.role!r} ({spec.name})")
        check_params(checkpoint.params, spec)
        self.spec = spec
        p = checkpoint.params
        self._layers = []
        din = spec.input_dim
        for l in range(1, spec.layers + 1):
            w = kernels.stream_weights(np.concatenate([p[f"l{l}.h.w"], p[f"l{l}.a.w"]]).astype(np.float64))
            b = np.ascontiguousarray(np.concatenate([p[f"l{l}.h.b"], p[f"l{l}.a.b"]]), dtype=np.float64)
            self._layers.append((w, b, din))
            din = spec.feature_width
        self._cls_w = np.ascontiguousarray(p["cls.w"], dtype=np.float64)
        self._cls_b = np.ascontiguousarray(p["cls.b"], dtype=np.float64)
        self._rings = [np.zeros((spec.past_extent, d)) for _, _, d in self._layers]
        self.head = 0
        self.frames = 0

    def push_frame(self, x_t):
        """Logits (length M + 1) for the next frame of the stream."""
        z = np.asarray(x_t, dtype=np.float64).reshape(-1)
        if z.shape[0] != self.spec.input_dim:
            raise ValueError(f"frame has {z.shape[0]} values, model expects D={self.spec.input_dim}")
        if not np.all(np.isfinite(z)):
            raise ValueError("frame contains non-finite values")
        past = self.spec.past_extent
        for (w, b, _), ring in zip(self._layers, self._rings):
            out = np.maximum(kernels.stream_layer(ring, self.head, z, w, b), 0.0)
            if past:
                ring[self.head] = z
            z = out
        if past:
            self.head = (self.head + 1) % past
        self.frames += 1
        return self._cls_w @ z + self._cls_b

    def reset(self):
        for ring in self._rings:
            ring.fill(0.0)
        self.head = 0
        self.frames = 0

    def state_bytes(self):
        """Bytes held by the ring buffers; independent of stream length."""
        return sum(r.nbytes for r in self._rings)

    @staticmethod
    def expected_state_bytes(spec, itemsize=8):
        return spec.past_extent * (spec.input_dim + (spec.layers - 1) * spec.feature_width) * itemsize


def create_session(checkpoint):
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    return StreamSession(checkpoint)


def push_frame(session, x_t):
    return session.push_frame(x_t)


def reset(session):
    session.reset()
