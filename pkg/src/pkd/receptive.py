"""Receptive-field arithmetic for stacks of offset convolutions.

Intervals are closed and measured in frames.
"""
from typing import NamedTuple, Sequence, Tuple


class LayerGeom(NamedTuple):
    past: int
    future: int

    @property
    def kernel_size(self):
        return self.past + self.future + 1


def _validate(layers):
    if not layers:
        raise ValueError("need at least one layer")
    for i, g in enumerate(layers):
        if g[0] < 0 or g[1] < 0:
            raise ValueError(f"layer {i}: past/future must be >= 0, got {tuple(g)}")


def receptive_field(layers: Sequence[Tuple[int, int]], t: int) -> Tuple[int, int]:
    """Input frames that can influence the stack's output at frame ``t``."""
    _validate(layers)
    return (t - sum(g[0] for g in layers), t + sum(g[1] for g in layers))


def set_receptive_field(layers, t_lo, t_hi):
    """Union of :func:`receptive_field` over every ``t`` in ``[t_lo, t_hi]``."""
    if t_lo > t_hi:
        raise ValueError(f"empty range [{t_lo}, {t_hi}]")
    lo, _ = receptive_field(layers, t_lo)
    _, hi = receptive_field(layers, t_hi)
    return (lo, hi)


def alignment_window(k: int) -> int:
    """Number of future teacher frames averaged per intermediate student feature.

    For a teacher whose layers each look ``k`` frames ahead the window is ``k``.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    return k


def student_geoms(layers=2, past_extent=4):
    return [LayerGeom(past_extent, 0)] * layers


def teacher_geoms(k, layers=2, past_extent=4):
    return [LayerGeom(past_extent, k)] * layers
