"""Per-frame ranking metrics: AP, calibrated AP (cAP), and portion-wise mcAP."""
import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import formats


def _ranked_hits(scores, positives):
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and positives {positives.shape} must be equal-length vectors")
    # stable sort on the negated score: ties keep original frame order
    order = np.argsort(-scores, kind="stable")
    return positives[order]


def calibrated_ap(scores, positives, omega):
    """``sum_k cPrec(k) I(k) / P`` with ``cPrec = TP / (TP + FP / omega)``."""
    if not omega > 0:
        raise ValueError(f"omega must be > 0, got {omega}")
    hits = _ranked_hits(scores, positives)
    P = int(hits.sum())
    if P == 0:
        raise ValueError("no positive frames")
    tp = np.cumsum(hits, dtype=np.float64)
    fp = np.cumsum(~hits, dtype=np.float64)
    cprec = tp / (tp + fp / omega)
    return float(cprec[hits].sum() / P)


def average_precision(scores, positives):
    return calibrated_ap(scores, positives, 1.0)


@dataclass
class EvalReport:
    classes: List[int]  # action classes with at least one positive frame
    ap: List[float]  # per class, fraction in [0, 1]
    cap: List[float]
    omega: List[float]
    positives: List[int]
    frames: int
    map: float  # percent
    mcap: float  # percent
    skipped: List[int] = field(default_factory=list)  # classes absent from ground truth
    portions: Optional[List[float]] = None  # per-portion mcAP, percent
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "AP", "cAP", "omega"])
        for c, a, ca, om in zip(self.classes, self.ap, self.cap, self.omega):
            w.writerow([c, f"{100 * a:.6f}", f"{100 * ca:.6f}", f"{om:.6f}"])
        w.writerow(["mean", f"{self.map:.6f}", f"{self.mcap:.6f}", ""])
        for b, v in enumerate(self.portions or []):
            w.writerow([f"portion_{b}", "", "" if v is None else f"{v:.6f}", ""])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _per_class(scores, labels, keep=None, pos_mask=None):
    """AP/cAP for every action class over the frames in ``keep``."""
    F, K = scores.shape
    keep = np.ones(F, dtype=bool) if keep is None else keep
    pos_mask = np.ones(F, dtype=bool) if pos_mask is None else pos_mask
    sub_scores = scores[keep]
    sub_labels = labels[keep]
    sub_pos = pos_mask[keep]
    out = []
    for m in range(1, K):
        pos = (sub_labels == m) & sub_pos
        P = int(pos.sum())
        if P == 0:
            out.append((m, None))
            continue
        omega = (pos.size - P) / P
        col = sub_scores[:, m]
        ap = average_precision(col, pos)
        # omega == 0 means every kept frame is positive: cAP is 1 regardless
        cap = calibrated_ap(col, pos, omega) if omega > 0 else 1.0
        out.append((m, (ap, cap, omega, P)))
    return out


def _check_inputs(frame_scores, labels):
    scores = np.asarray(frame_scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ValueError(f"scores must be F x (M+1) and labels length F; got {scores.shape}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= scores.shape[1]):
        raise ValueError(f"labels must lie in [0, {scores.shape[1] - 1}]")
    return scores, labels


def evaluate(frame_scores, labels, portions=None, lengths=None, include_other_portions=False):
    """Per-class AP and cAP over all frames; mAP/mcAP average the classes that occur.

    ``omega`` for class ``m`` is the number of non-``m`` frames over the number
    of ``m`` frames. ``portions`` (a bin count) adds a portion-wise mcAP curve.
    """
    scores, labels = _check_inputs(frame_scores, labels)
    if not (labels > 0).any():
        raise ValueError("no action frames: nothing to evaluate")
    rows = _per_class(scores, labels)
    present = [(m, r) for m, r in rows if r is not None]
    rep = EvalReport(
        classes=[m for m, _ in present],
        ap=[r[0] for _, r in present],
        cap=[r[1] for _, r in present],
        omega=[r[2] for _, r in present],
        positives=[r[3] for _, r in present],
        frames=int(labels.size),
        map=100.0 * float(np.mean([r[0] for _, r in present])),
        mcap=100.0 * float(np.mean([r[1] for _, r in present])),
        skipped=[m for m, r in rows if r is None],
    )
    if portions:
        rep.portions = portion_eval(scores, labels, portions, lengths, include_other_portions)
    return rep


def instance_runs(labels, lengths=None):
    """Maximal runs of a constant nonzero label as ``(start, stop, label)``.

    ``lengths`` splits the frame axis into sequences; runs never cross them.
    """
    labels = np.asarray(labels)
    cuts = set(np.cumsum(lengths)[:-1].tolist()) if lengths is not None else set()
    runs = []
    start = None
    for f in range(labels.size + 1):
        boundary = f == labels.size or f in cuts or (f > 0 and labels[f] != labels[f - 1])
        if start is not None and boundary:
            runs.append((start, f, int(labels[start])))
            start = None
        if f < labels.size and labels[f] != 0 and start is None:
            start = f
    return runs


def portion_bins(labels, bins=10, lengths=None):
    """Bin index of each action frame by relative position in its instance; -1 for background."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    out = np.full(np.asarray(labels).size, -1, dtype=np.int64)
    for start, stop, _ in instance_runs(labels, lengths):
        n = stop - start
        out[start:stop] = (np.arange(n) * bins) // n
    return out


def portion_eval(frame_scores, labels, bins=10, lengths=None, include_other_portions=False):
    """mcAP (percent) restricted to action frames in each relative-position bin.

    Background frames are negatives for every bin. Action frames outside the
    bin are dropped, or kept as negatives with ``include_other_portions``.
    Bins with no positives come out as ``None``.
    """
    scores, labels = _check_inputs(frame_scores, labels)
    pb = portion_bins(labels, bins, lengths)
    if not (pb >= 0).any():
        raise ValueError("no action instances")
    out = []
    for b in range(bins):
        in_bin = pb == b
        keep = np.ones(labels.size, dtype=bool) if include_other_portions else ((labels == 0) | in_bin)
        rows = [r for _, r in _per_class(scores, labels, keep, in_bin) if r is not None]
        out.append(100.0 * float(np.mean([r[1] for r in rows])) if rows else None)
    return out


# ------------------------------------------------------------ prediction files


def load_predictions(path):
    """Frame scores and labels from a PKDS file (scores stored as features) or a CSV
    with columns ``label, s0, s1, ...``. Returns ``(scores, labels, lengths)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == formats.PKDS_MAGIC:
        _, _, seqs = formats.decode_dataset(raw)
        scores = np.concatenate([s for s, _ in seqs]).astype(np.float64)
        labels = np.concatenate([l for _, l in seqs])
        return scores, labels, [len(l) for _, l in seqs]
    rows = list(csv.reader(io.StringIO(raw.decode("utf-8"))))
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    labels = np.array([int(r[0]) for r in rows])
    scores = np.array([[float(v) for v in r[1:]] for r in rows])
    return scores, labels, None


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False
