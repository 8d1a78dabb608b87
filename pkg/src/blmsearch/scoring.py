"""Chunked embeddings and bilinear scoring kernels.

The relation matrix ``g_K(A, r)`` is never materialized.  It is applied as a
blockwise operator: output chunk ``i`` of ``g @ x`` is
``sum_j sign(A_ij) * r_{|A_ij|} * x_j`` (elementwise products of chunks).
"""

from __future__ import annotations

import functools
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .structure import InvalidArgument, StructureMatrix


@dataclass(frozen=True)
class HyperParams:
    d: int = 64
    eta: float = 0.1
    lam: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    k: int = 4

    def __post_init__(self):
        if self.d <= 0 or self.d % self.k:
            raise InvalidArgument(f"d={self.d} must be a positive multiple of k={self.k}")
        if not 0 < self.eta <= 1:
            raise InvalidArgument("eta must lie in (0, 1]")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise InvalidArgument("batch_size and epochs must be positive")

    def replace(self, **changes) -> "HyperParams":
        return HyperParams(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingStore:
    entity: np.ndarray
    relation: np.ndarray
    k: int
    seed: int = 0

    @property
    def d(self) -> int:
        return self.entity.shape[1]

    @property
    def chunk(self) -> int:
        return self.d // self.k

    def copy(self) -> "EmbeddingStore":
        return EmbeddingStore(self.entity.copy(), self.relation.copy(), self.k, self.seed)

    def chunks(self, vec: np.ndarray) -> np.ndarray:
        return vec.reshape(*vec.shape[:-1], self.k, self.chunk)

    def save(self, path) -> None:
        """Header of five little-endian int64 (|E|, |R|, d, k, seed), then float64 rows."""
        with open(path, "wb") as f:
            f.write(struct.pack("<5q", len(self.entity), len(self.relation), self.d, self.k, self.seed))
            f.write(np.ascontiguousarray(self.entity, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(self.relation, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as f:
            n_e, n_r, d, k, seed = struct.unpack("<5q", f.read(40))
            ent = np.frombuffer(f.read(8 * n_e * d), dtype="<f8").reshape(n_e, d).copy()
            rel = np.frombuffer(f.read(8 * n_r * d), dtype="<f8").reshape(n_r, d).copy()
        return cls(ent.astype(np.float64), rel.astype(np.float64), k, seed)


def init_embeddings(n_entities: int, n_relations: int, hp: HyperParams) -> EmbeddingStore:
    if n_entities <= 0 or n_relations <= 0:
        raise InvalidArgument("entity and relation counts must be positive")
    if hp.d % hp.k:
        raise InvalidArgument(f"d={hp.d} is not divisible by k={hp.k}")
    rng = np.random.default_rng(hp.seed)
    bound = 0.5 / np.sqrt(hp.d)
    ent = rng.uniform(-bound, bound, size=(n_entities, hp.d))
    rel = rng.uniform(-bound, bound, size=(n_relations, hp.d))
    return EmbeddingStore(ent, rel, hp.k, hp.seed)


@functools.lru_cache(maxsize=4096)
def _terms(raw: bytes, k: int) -> tuple[tuple[int, int, int, float], ...]:
    ent = np.frombuffer(raw, dtype=np.uint8).astype(np.int64).reshape(k, k) - k
    return tuple(
        (i, j, abs(int(ent[i, j])) - 1, float(np.sign(ent[i, j])))
        for i in range(k)
        for j in range(k)
        if ent[i, j]
    )


def structure_terms(a: StructureMatrix):
    """Nonzero entries as ``(row, col, relation chunk, sign)`` with 0-based chunk index."""
    return _terms(a.raw_bytes(), a.k)


def _check_k(a: StructureMatrix, d: int):
    if d % a.k:
        raise InvalidArgument(f"vector length {d} not divisible by k={a.k}")


def apply_batch(a: StructureMatrix, rel: np.ndarray, x: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Row-wise ``g(A, rel[b]) @ x[b]`` (or the transposed operator) for 2-D inputs."""
    if rel.shape != x.shape:
        raise InvalidArgument(f"shape mismatch {rel.shape} vs {x.shape}")
    _check_k(a, x.shape[-1])
    k = a.k
    rc = rel.reshape(*rel.shape[:-1], k, -1)
    xc = x.reshape(*x.shape[:-1], k, -1)
    out = np.zeros_like(xc)
    for i, j, m, s in structure_terms(a):
        if transpose:
            i, j = j, i
        if s > 0:
            out[..., i, :] += rc[..., m, :] * xc[..., j, :]
        else:
            out[..., i, :] -= rc[..., m, :] * xc[..., j, :]
    return out.reshape(x.shape)


def relation_grad(
    a: StructureMatrix, x: np.ndarray, dy: np.ndarray, transpose: bool = False
) -> np.ndarray:
    """Gradient w.r.t. ``rel`` of ``sum(dy * apply_batch(a, rel, x, transpose))``."""
    k = a.k
    xc = x.reshape(*x.shape[:-1], k, -1)
    gc = dy.reshape(*dy.shape[:-1], k, -1)
    out = np.zeros_like(xc)
    for i, j, m, s in structure_terms(a):
        if transpose:
            i, j = j, i
        out[..., m, :] += s * gc[..., i, :] * xc[..., j, :]
    return out.reshape(x.shape)


def apply_relation(a: StructureMatrix, r_vec, t_vec) -> np.ndarray:
    r_vec = np.asarray(r_vec, dtype=np.float64)
    t_vec = np.asarray(t_vec, dtype=np.float64)
    if r_vec.ndim != 1 or r_vec.shape != t_vec.shape:
        raise InvalidArgument("r_vec and t_vec must be vectors of equal length")
    return apply_batch(a, r_vec, t_vec)


def _check_ids(store: EmbeddingStore, entities=(), relations=()):
    for e in entities:
        if not 0 <= e < len(store.entity):
            raise InvalidArgument(f"entity id {e} out of range")
    for r in relations:
        if not 0 <= r < len(store.relation):
            raise InvalidArgument(f"relation id {r} out of range")


def score_triple(a: StructureMatrix, store: EmbeddingStore, h: int, r: int, t: int) -> float:
    _check_ids(store, (h, t), (r,))
    return float(store.entity[h] @ apply_relation(a, store.relation[r], store.entity[t]))


def score_all_tails(a: StructureMatrix, store: EmbeddingStore, h: int, r: int) -> np.ndarray:
    _check_ids(store, (h,), (r,))
    query = apply_batch(a, store.relation[r], store.entity[h], transpose=True)
    return store.entity @ query


def score_all_heads(a: StructureMatrix, store: EmbeddingStore, r: int, t: int) -> np.ndarray:
    _check_ids(store, (t,), (r,))
    return store.entity @ apply_relation(a, store.relation[r], store.entity[t])


def score_path(a: StructureMatrix, store: EmbeddingStore, e0: int, relations: Sequence[int], e_last: int) -> float:
    """``e0^T g(A, r_1) ... g(A, r_L) e_last``, applied right to left."""
    if len(relations) == 0:
        raise InvalidArgument("path needs at least one relation")
    _check_ids(store, (e0, e_last), relations)
    v = store.entity[e_last]
    for r in reversed(list(relations)):
        v = apply_relation(a, store.relation[r], v)
    return float(store.entity[e0] @ v)


def path_queries(a: StructureMatrix, store: EmbeddingStore, starts: np.ndarray, paths: np.ndarray) -> np.ndarray:
    """Query vectors ``g_L^T ... g_1^T e0`` for a batch; terminal scores are ``E @ q``."""
    q = store.entity[starts]
    for step in range(paths.shape[1]):
        q = apply_batch(a, store.relation[paths[:, step]], q, transpose=True)
    return q


def dense_relation_matrix(a: StructureMatrix, r_vec) -> np.ndarray:
    """Materialized d x d ``g_K(A, r)``; test oracle only."""
    r_vec = np.asarray(r_vec, dtype=np.float64)
    k = a.k
    c = len(r_vec) // k
    out = np.zeros((len(r_vec), len(r_vec)))
    for i in range(k):
        for j in range(k):
            v = int(a.entries[i, j])
            if v:
                block = np.sign(v) * np.diag(r_vec[(abs(v) - 1) * c : abs(v) * c])
                out[i * c : (i + 1) * c, j * c : (j + 1) * c] = block
    return out
