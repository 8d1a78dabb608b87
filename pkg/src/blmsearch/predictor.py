"""Symmetry-related features and the MLP performance predictor."""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .structure import InvalidArgument, StructureMatrix, relation_patterns, symmetry_masks


@functools.lru_cache(maxsize=None)
def srf_groups(k: int) -> tuple[tuple[int, int], ...]:
    """Valid ``(zeros, distinct magnitudes)`` pairs in lexicographic order."""
    return tuple((x, y) for x in range(k) for y in range(1, k - x + 1))


@functools.lru_cache(maxsize=None)
def _pattern_group_index(k: int) -> np.ndarray:
    pats = relation_patterns(k)
    index = {g: n for n, g in enumerate(srf_groups(k))}
    out = np.empty(len(pats), dtype=np.int64)
    for n, row in enumerate(pats):
        x = int(np.count_nonzero(row == 0))
        y = len(set(np.abs(row[row != 0]).tolist()))
        out[n] = index[(x, y)]
    out.setflags(write=False)
    return out


def srf_features(a: StructureMatrix) -> np.ndarray:
    """Binary vector of length k(k+1): symmetric-group bits then skew-group bits."""
    groups = _pattern_group_index(a.k)
    n_groups = len(srf_groups(a.k))
    sym, skew = symmetry_masks(a)
    alpha = np.zeros(n_groups, dtype=np.int8)
    beta = np.zeros(n_groups, dtype=np.int8)
    alpha[groups[sym]] = 1
    beta[groups[skew]] = 1
    return np.concatenate((alpha, beta))


@dataclass
class Predictor:
    """Two-layer rectifier MLP mapping an SRF vector to predicted validation MRR."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    seed: int = 0
    loss_history: list = field(default_factory=list, repr=False)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def predict(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise InvalidArgument(f"expected {self.input_dim} features, got {x.shape[1]}")
        hid = np.maximum(x @ self.w1 + self.b1, 0.0)
        return hid @ self.w2 + self.b2

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_dim": self.input_dim,
                "hidden": self.hidden,
                "seed": self.seed,
                "w1": self.w1.tolist(),
                "b1": self.b1.tolist(),
                "w2": self.w2.tolist(),
                "b2": self.b2,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Predictor":
        d = json.loads(text)
        return cls(
            w1=np.array(d["w1"], dtype=np.float64),
            b1=np.array(d["b1"], dtype=np.float64),
            w2=np.array(d["w2"], dtype=np.float64),
            b2=float(d["b2"]),
            seed=int(d["seed"]),
        )


def predictor_fit(
    features: np.ndarray,
    targets: Sequence[float],
    seed: int = 0,
    hidden: int = 64,
    lr: float = 1e-2,
    steps: int = 2000,
) -> Predictor:
    """Full-batch gradient descent on mean squared error.

    The hidden layer starts uniform in [-0.1, 0.1]; the output weights start
    at zero and the output bias at the target mean, so the initial fit is
    the best constant predictor and descent only improves on it.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise InvalidArgument("predictor_fit needs at least one record")
    if len(y) != len(x):
        raise InvalidArgument("features and targets differ in length")
    rng = np.random.default_rng(seed)
    n, dim = x.shape
    w1 = rng.uniform(-0.1, 0.1, size=(dim, hidden))
    b1 = rng.uniform(-0.1, 0.1, size=hidden)
    w2 = np.zeros(hidden)
    b2 = float(y.mean())
    history = []
    for _ in range(steps):
        pre = x @ w1 + b1
        hid = np.maximum(pre, 0.0)
        err = hid @ w2 + b2 - y
        history.append(float(np.mean(err**2)))
        g_out = 2.0 * err / n
        g_w2 = hid.T @ g_out
        g_b2 = g_out.sum()
        g_hid = np.outer(g_out, w2) * (pre > 0)
        w1 -= lr * (x.T @ g_hid)
        b1 -= lr * g_hid.sum(axis=0)
        w2 -= lr * g_w2
        b2 -= lr * g_b2
    return Predictor(w1=w1, b1=b1, w2=w2, b2=b2, seed=seed, loss_history=history)


def fit_records(records, seed: int = 0, **kwargs) -> Predictor:
    """Fit on a list of :class:`SearchRecord`-like objects (``srf``, ``val_mrr``)."""
    if not records:
        raise InvalidArgument("predictor_fit needs at least one record")
    x = np.array([r.srf for r in records], dtype=np.float64)
    y = np.array([r.val_mrr for r in records], dtype=np.float64)
    return predictor_fit(x, y, seed=seed, **kwargs)


def predictor_rank(
    p: Predictor,
    candidates: Sequence[StructureMatrix],
    top_p: int,
    features: Optional[Sequence[np.ndarray]] = None,
) -> list[StructureMatrix]:
    """Top ``top_p`` candidates by predicted score, descending, stable on ties."""
    if not candidates:
        return []
    feats = features if features is not None else [srf_features(a) for a in candidates]
    scores = p.predict(np.array(feats))
    order = sorted(range(len(candidates)), key=lambda i: -scores[i])
    return [candidates[i] for i in order[: min(top_p, len(candidates))]]
