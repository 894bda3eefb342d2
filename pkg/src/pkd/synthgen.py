"""Synthetic streaming-action benchmark and its exact Bayes oracle.

Latent chain: a background state, and for every action class ``m`` a run of
``d`` onset states followed by one sustained state. Onset states emit the
prototype shared by ``m``'s confusion group, so the first ``d`` frames of an
action are ambiguous until later frames reveal the class. Durations are
geometric, which keeps the chain a plain first-order HMM with
``1 + M * (d + 1)`` states and makes forward-backward exact.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from . import formats, kernels
from .metrics import evaluate
from .seeding import rng


@dataclass(frozen=True)
class GenConfig:
    M: int = 6
    D: int = 16
    ambiguity_len: int = 6
    groups: Tuple[Tuple[int, ...], ...] = ((1, 2), (3, 4), (5, 6))
    mean_background: float = 16.0
    mean_action: float = 16.0
    noise_sigma: float = 2.0
    prototype_separation: float = 3.0
    T: int = 256
    n_train: int = 200
    n_test: int = 60
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(c) for c in g) for g in self.groups))
        if self.M < 1 or self.D < 1 or self.T < 1:
            raise ValueError("M, D and T must be >= 1")
        if self.ambiguity_len < 0:
            raise ValueError("ambiguity_len must be >= 0")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        members = sorted(c for g in self.groups for c in g)
        if members != list(range(1, self.M + 1)):
            raise ValueError(f"groups must partition classes 1..{self.M}, got {self.groups}")
        if self.mean_background < 1:
            raise ValueError("mean_background must be >= 1")
        if self.ambiguity_len >= self.mean_action:
            raise ValueError(f"ambiguity_len={self.ambiguity_len} must be < mean_action={self.mean_action}")
        if self.mean_action - self.ambiguity_len < 1:
            raise ValueError("mean sustained length (mean_action - ambiguity_len) must be >= 1")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("sequence counts must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["groups"] = [list(g) for g in self.groups]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["groups"] = tuple(tuple(g) for g in d["groups"])
        return cls(**d)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def num_states(self):
        return 1 + self.M * (self.ambiguity_len + 1)

    def group_of(self, m):
        for i, g in enumerate(self.groups):
            if m in g:
                return i
        raise KeyError(m)


@dataclass
class SequenceSet:
    sequences: List[Tuple[np.ndarray, np.ndarray]]
    M: int
    D: int
    provenance: str = ""
    split: str = ""
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sequences)

    def subset(self, idx):
        return SequenceSet([self.sequences[i] for i in idx], self.M, self.D, self.provenance,
                           self.split, self.config)

    def frames(self):
        x = np.concatenate([s[0] for s in self.sequences])
        y = np.concatenate([s[1] for s in self.sequences])
        return x, y

    @property
    def lengths(self):
        return [len(s[1]) for s in self.sequences]

    def to_bytes(self):
        return formats.encode_dataset(self.M, self.D, self.sequences)

    def save(self, path):
        path = Path(path)
        path.write_bytes(self.to_bytes())
        side = {"hash": self.provenance, "split": self.split, "config": self.config}
        Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        M, D, seqs = formats.decode_dataset(path.read_bytes())
        side_path = Path(str(path) + ".json")
        side = json.loads(side_path.read_text()) if side_path.exists() else {}
        return cls(seqs, M, D, side.get("hash", ""), side.get("split", ""), side.get("config", {}))


# ---------------------------------------------------------------- generator


def prototypes(cfg):
    """Emission means: background, one per class, one per confusion group."""
    n = 1 + cfg.M + len(cfg.groups)
    raw = rng(cfg.seed, "prototypes").standard_normal((n, cfg.D))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    # unit directions scaled so independent pairs sit about `separation` apart
    protos = raw * (cfg.prototype_separation / np.sqrt(2.0))
    return protos[0], protos[1:1 + cfg.M], protos[1 + cfg.M:]


def state_means(cfg):
    bg, cls, grp = prototypes(cfg)
    d = cfg.ambiguity_len
    means = np.empty((cfg.num_states, cfg.D))
    means[0] = bg
    for m in range(1, cfg.M + 1):
        base = 1 + (m - 1) * (d + 1)
        means[base:base + d] = grp[cfg.group_of(m)]
        means[base + d] = cls[m - 1]
    return means


def state_labels(cfg):
    d = cfg.ambiguity_len
    lab = np.zeros(cfg.num_states, dtype=np.int64)
    for m in range(1, cfg.M + 1):
        base = 1 + (m - 1) * (d + 1)
        lab[base:base + d + 1] = m
    return lab


def transition_matrix(cfg):
    d = cfg.ambiguity_len
    S = cfg.num_states
    A = np.zeros((S, S))
    leave_bg = 1.0 / cfg.mean_background
    leave_sus = 1.0 / (cfg.mean_action - d)
    A[0, 0] = 1.0 - leave_bg
    for m in range(1, cfg.M + 1):
        base = 1 + (m - 1) * (d + 1)
        A[0, base] += leave_bg / cfg.M
        for j in range(d):
            A[base + j, base + j + 1] = 1.0
        A[base + d, base + d] = 1.0 - leave_sus
        A[base + d, 0] = leave_sus
    return A


def sample_states(cfg, r):
    """One latent state path of length ``cfg.T``, starting in background."""
    d = cfg.ambiguity_len
    out = np.empty(cfg.T, dtype=np.int64)
    t = 0
    while t < cfg.T:
        n_bg = r.geometric(1.0 / cfg.mean_background)
        out[t:t + n_bg] = 0
        t += n_bg
        if t >= cfg.T:
            break
        m = int(r.integers(1, cfg.M + 1))
        base = 1 + (m - 1) * (d + 1)
        run = np.concatenate([base + np.arange(d), np.full(r.geometric(1.0 / (cfg.mean_action - d)), base + d)])
        n = min(run.size, cfg.T - t)
        out[t:t + n] = run[:n]
        t += n
    return out


def generate(cfg, split="train"):
    """Train or test split of the benchmark; features are float32."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    n = cfg.n_train if split == "train" else cfg.n_test
    means = state_means(cfg)
    labs = state_labels(cfg)
    seqs = []
    for i in range(n):
        r = rng(cfg.seed, "data", split, i)
        states = sample_states(cfg, r)
        x = means[states] + cfg.noise_sigma * r.standard_normal((cfg.T, cfg.D))
        seqs.append((x.astype(np.float32), labs[states]))
    return SequenceSet(seqs, cfg.M, cfg.D, cfg.hash(), split, cfg.to_dict())


# ---------------------------------------------------------------- oracle


def _likelihoods(cfg, means, x):
    x = np.asarray(x, dtype=np.float64)
    sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    ll = -sq / (2.0 * cfg.noise_sigma ** 2)
    ll -= ll.max(axis=1, keepdims=True)
    return np.exp(ll)


def state_posteriors(cfg, x, w):
    """``p(s_t | x_0 .. x_{t+w})`` for every frame of one sequence."""
    A = transition_matrix(cfg)
    lik = _likelihoods(cfg, state_means(cfg), x)
    init = np.zeros(cfg.num_states)
    init[0] = 1.0
    alpha = kernels.hmm_forward(init, A, lik)
    if w <= 0:
        return alpha
    beta = kernels.hmm_window_beta(A, lik, min(int(w), lik.shape[0]))
    post = alpha * beta
    return post / post.sum(axis=1, keepdims=True)


def class_posteriors(cfg, x, w):
    post = state_posteriors(cfg, x, w)
    labs = state_labels(cfg)
    out = np.zeros((post.shape[0], cfg.M + 1))
    np.add.at(out.T, labs, post.T)
    return out


def bayes_oracle(cfg, data, w, portions=None):
    """Exact per-frame class posteriors using the future window ``w`` and their report."""
    if data.provenance != cfg.hash():
        raise ValueError(f"dataset provenance {data.provenance!r} does not match config hash {cfg.hash()!r}")
    scores = [class_posteriors(cfg, x, w) for x, _ in data.sequences]
    labels = np.concatenate([y for _, y in data.sequences])
    all_scores = np.concatenate(scores)
    rep = evaluate(all_scores, labels, portions=portions, lengths=data.lengths)
    rep.extra["future_window"] = int(w)
    return all_scores, rep
