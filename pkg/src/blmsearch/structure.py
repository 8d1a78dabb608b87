"""Integer algebra over K x K structure matrices.

A structure matrix ``A`` has entries in ``{-K, ..., K}``.  Entry ``A[i][j] = s*m``
(``m >= 1``) says that the bilinear score contains the term
``s * <h_i, r_m, t_j>`` over embedding chunks; a zero entry contributes nothing.
"""

from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


class InvalidArgument(ValueError):
    """Raised for malformed structures, patterns or names."""


@dataclass(frozen=True, eq=False)
class StructureMatrix:
    """Immutable K x K integer structure matrix."""

    entries: np.ndarray

    def __init__(self, entries, k: Optional[int] = None):
        arr = np.array(entries, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise InvalidArgument(f"structure matrix must be square, got shape {arr.shape}")
        if k is not None and arr.shape[0] != k:
            raise InvalidArgument(f"expected k={k}, got {arr.shape[0]}")
        n = arr.shape[0]
        if n < 2:
            raise InvalidArgument("k must be at least 2")
        if np.abs(arr).max(initial=0) > n:
            raise InvalidArgument(f"entries must lie in [-{n}, {n}]")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.entries))

    def raw_bytes(self) -> bytes:
        return (self.entries + self.k).astype(np.uint8).tobytes()

    def tolist(self) -> list[list[int]]:
        return self.entries.tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, StructureMatrix):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.entries, other.entries)

    def __hash__(self) -> int:
        return hash((self.k, self.raw_bytes()))

    def __repr__(self) -> str:
        return f"StructureMatrix({self.tolist()})"

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "entries": self.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "StructureMatrix":
        data = json.loads(text)
        try:
            return cls(data["entries"], k=data.get("k"))
        except (KeyError, TypeError) as exc:
            raise InvalidArgument(f"malformed structure JSON: {exc}") from exc


def _as_pattern(a: StructureMatrix, r: Sequence[int]) -> np.ndarray:
    vec = np.asarray(r, dtype=np.int64)
    if vec.shape != (a.k,):
        raise InvalidArgument(f"relation pattern must have length {a.k}, got {vec.shape}")
    return vec


def signature_matrix(a: StructureMatrix, r: Sequence[int]) -> np.ndarray:
    """Scalar realization of the block relation matrix: ``sign(A_ij) * r[|A_ij|]``."""
    vec = _as_pattern(a, r)
    padded = np.concatenate(([0], vec))
    return np.sign(a.entries) * padded[np.abs(a.entries)]


# ---------------------------------------------------------------------------
# Degeneracy


def integer_rank(rows: Iterable[Sequence[int]]) -> int:
    """Exact rank of an integer matrix by fraction-free (Bareiss) elimination."""
    m = [list(map(int, row)) for row in rows]
    if not m:
        return 0
    n_rows, n_cols = len(m), len(m[0])
    rank, prev = 0, 1
    for col in range(n_cols):
        pivot = next((i for i in range(rank, n_rows) if m[i][col] != 0), None)
        if pivot is None:
            continue
        m[rank], m[pivot] = m[pivot], m[rank]
        p = m[rank][col]
        for i in range(rank + 1, n_rows):
            factor = m[i][col]
            for j in range(col, n_cols):
                # exact division is guaranteed by Bareiss
                m[i][j] = (p * m[i][j] - factor * m[rank][j]) // prev
        prev = p
        rank += 1
        if rank == n_rows:
            break
    return rank


def structure_rank(a: StructureMatrix) -> int:
    return integer_rank(a.entries.tolist())


def _coefficient_stack(a: StructureMatrix, transpose: bool) -> list[list[int]]:
    # row i holds, for every relation chunk m and column j, the signed
    # indicator [|A_ij| = m] * sign(A_ij); a common left null vector of all
    # realizations exists iff this K x K^2 matrix is rank deficient.
    ent = a.entries.T if transpose else a.entries
    k = a.k
    out = [[0] * (k * k) for _ in range(k)]
    for i in range(k):
        for j in range(k):
            v = int(ent[i, j])
            if v:
                out[i][(abs(v) - 1) * k + j] = 1 if v > 0 else -1
    return out


def covers_all_values(a: StructureMatrix) -> bool:
    present = set(np.abs(a.entries).ravel().tolist())
    return all(m in present for m in range(1, a.k + 1))


def is_degenerate(a: StructureMatrix) -> bool:
    """True if some nonzero head, tail or relation embedding zeroes every score.

    Non-degenerate requires every value ``1..K`` to appear (otherwise a
    relation chunk is unused) and no common null vector on the head side or
    the tail side across all relation realizations.  Both rank tests run in
    exact integer arithmetic.  At K=2 this coincides with the
    ``rank(A) = K`` test; for K >= 3 an integer matrix can be singular by
    coincidence while every realization is generically invertible, so the
    null-space form is used throughout.
    """
    if not covers_all_values(a):
        return True
    k = a.k
    if integer_rank(_coefficient_stack(a, transpose=False)) < k:
        return True
    return integer_rank(_coefficient_stack(a, transpose=True)) < k


# ---------------------------------------------------------------------------
# Equivalence


@functools.lru_cache(maxsize=None)
def _orbit_tables(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Index permutations and signed value maps generating every orbit.

    Returns ``(perms, value_maps)``: ``perms`` has shape ``(k!, k)``;
    ``value_maps`` has shape ``(k! * 2^k, 2k+1)`` and maps ``v + k`` to the
    transformed value.  Value maps enumerate value permutation first, then
    sign flip.
    """
    perms = np.array(list(itertools.permutations(range(k))), dtype=np.int64)
    maps = []
    vals = np.arange(-k, k + 1)
    for sigma in itertools.permutations(range(1, k + 1)):
        sigma0 = np.array((0,) + sigma)
        for signs in itertools.product((1, -1), repeat=k):
            s0 = np.array((1,) + signs)
            permuted = np.sign(vals) * sigma0[np.abs(vals)]
            maps.append(s0[np.abs(permuted)] * permuted)
    return perms, np.array(maps, dtype=np.int64)


def _orbit_array(a: StructureMatrix) -> np.ndarray:
    """All (k!)^2 2^k transformed copies of ``a`` as a ``(n, k*k)`` array."""
    k = a.k
    perms, maps = _orbit_tables(k)
    # A'[i][j] = A[p[i]][p[j]] is the row/column permutation P^T A P
    permuted = a.entries[perms[:, :, None], perms[:, None, :]].reshape(len(perms), k * k)
    return maps[:, permuted + k].reshape(-1, k * k)


def permute_indices(a: StructureMatrix, perm: Sequence[int]) -> StructureMatrix:
    p = np.asarray(perm)
    return StructureMatrix(a.entries[np.ix_(p, p)])


def permute_values(a: StructureMatrix, sigma: Sequence[int]) -> StructureMatrix:
    """Relabel value ``m`` as ``sigma[m-1]`` keeping signs."""
    table = np.concatenate(([0], np.asarray(sigma, dtype=np.int64)))
    return StructureMatrix(np.sign(a.entries) * table[np.abs(a.entries)])


def flip_signs(a: StructureMatrix, signs: Sequence[int]) -> StructureMatrix:
    table = np.concatenate(([1], np.asarray(signs, dtype=np.int64)))
    return StructureMatrix(table[np.abs(a.entries)] * a.entries)


def equivalence_orbit(a: StructureMatrix) -> set[StructureMatrix]:
    flat = np.unique(_orbit_array(a), axis=0)
    return {StructureMatrix(row.reshape(a.k, a.k)) for row in flat}


def orbit_size(a: StructureMatrix) -> int:
    return len(np.unique(_orbit_array(a), axis=0))


def canonical_key(a: StructureMatrix) -> bytes:
    """Row-major bytes (entries offset by +k) of the lexicographically least orbit member."""
    flat = _orbit_array(a)
    order = np.lexsort(flat.T[::-1])
    return (flat[order[0]] + a.k).astype(np.uint8).tobytes()


def canonical_form(a: StructureMatrix) -> StructureMatrix:
    key = np.frombuffer(canonical_key(a), dtype=np.uint8).astype(np.int64) - a.k
    return StructureMatrix(key.reshape(a.k, a.k))


def filter_check(a: StructureMatrix, history) -> bool:
    """True iff ``a`` is non-degenerate and no equivalent structure is in ``history``."""
    if is_degenerate(a):
        return False
    return canonical_key(a) not in history


# ---------------------------------------------------------------------------
# Expressiveness


@functools.lru_cache(maxsize=None)
def relation_patterns(k: int) -> np.ndarray:
    """Every nonzero pattern in ``{-k..k}^k``, ordered by witness preference.

    Preference: more nonzeros, more distinct magnitudes, more positions with
    ``|r_i| = i``, fewer negatives earlier, smaller magnitudes.
    """
    pats = np.array(list(itertools.product(range(-k, k + 1), repeat=k)), dtype=np.int64)
    pats = pats[np.any(pats != 0, axis=1)]
    absval = np.abs(pats)
    nnz = np.count_nonzero(pats, axis=1)
    distinct = np.array([len(set(row[row > 0].tolist())) for row in absval])
    mismatch = np.sum((absval != np.arange(1, k + 1)) & (absval > 0), axis=1)
    keys = [absval[:, c] for c in reversed(range(k))]
    keys += [(pats[:, c] < 0).astype(np.int64) for c in reversed(range(k))]
    keys += [mismatch, -distinct, -nnz]
    order = np.lexsort(keys)
    out = pats[order]
    out.setflags(write=False)
    return out


def _all_signatures(a: StructureMatrix) -> np.ndarray:
    padded = _padded_patterns(a.k)
    return np.sign(a.entries)[None] * padded[:, np.abs(a.entries)]


@functools.lru_cache(maxsize=None)
def _padded_patterns(k: int) -> np.ndarray:
    """:func:`relation_patterns` with a leading zero column, so column ``m`` holds ``r_m``."""
    pats = relation_patterns(k)
    out = np.concatenate((np.zeros((len(pats), 1), dtype=np.int64), pats), axis=1)
    out.setflags(write=False)
    return out


def symmetry_masks(a: StructureMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks over :func:`relation_patterns` for symmetric / skew signatures.

    An all-zero signature counts as both.  Compares the pair ``(i, j)``,
    ``(j, i)`` of every signature one cell pair at a time instead of
    materializing all signature matrices.
    """
    padded = _padded_patterns(a.k)
    sign, mag = np.sign(a.entries), np.abs(a.entries)
    sym = np.ones(len(padded), dtype=bool)
    skew = np.ones(len(padded), dtype=bool)
    for i in range(a.k):
        for j in range(i, a.k):
            g_ij = sign[i, j] * padded[:, mag[i, j]]
            g_ji = sign[j, i] * padded[:, mag[j, i]]
            sym &= g_ij == g_ji
            skew &= g_ij == -g_ji
    return sym, skew


@functools.lru_cache(maxsize=1024)
def _nonzero_signature_mask(a: StructureMatrix) -> np.ndarray:
    return np.any(_all_signatures(a) != 0, axis=(1, 2))


def find_witness(a: StructureMatrix, kind: str) -> Optional[list[int]]:
    """Most preferred pattern whose signature is nonzero and symmetric (or skew)."""
    sym, skew = symmetry_masks(a)
    mask = {"symmetric": sym, "skew": skew}[kind] & _nonzero_signature_mask(a)
    hits = np.flatnonzero(mask)
    return relation_patterns(a.k)[hits[0]].tolist() if len(hits) else None


def expressiveness_witnesses(a: StructureMatrix) -> Optional[tuple[list[int], list[int]]]:
    """Return ``(sym_pattern, skew_pattern)`` if both exist, else ``None``.

    A returned pair certifies full expressiveness.  ``None`` means the
    structure is not certified, not that it is provably inexpressive.
    """
    sym = find_witness(a, "symmetric")
    skew = find_witness(a, "skew")
    if sym is None or skew is None:
        return None
    return sym, skew


def is_symmetric_signature(a: StructureMatrix, r) -> bool:
    g = signature_matrix(a, r)
    return bool(np.array_equal(g, g.T))


def is_skew_signature(a: StructureMatrix, r) -> bool:
    g = signature_matrix(a, r)
    return bool(np.array_equal(g, -g.T))


# ---------------------------------------------------------------------------
# Classical models at K=4

_BUILTIN = {
    "distmult": [[1, 0, 0, 0], [0, 2, 0, 0], [0, 0, 3, 0], [0, 0, 0, 4]],
    # real parts in chunks 1-2, imaginary parts in chunks 3-4
    "complex": [[1, 0, 3, 0], [0, 2, 0, 4], [-3, 0, 1, 0], [0, -4, 0, 2]],
    "simple": [[0, 0, 1, 0], [0, 0, 0, 2], [3, 0, 0, 0], [0, 4, 0, 0]],
    "analogy": [[1, 0, 0, 0], [0, 2, 0, 0], [0, 0, 3, 4], [0, 0, -4, 3]],
    "quate": [[1, -2, -3, -4], [2, 1, 4, -3], [3, -4, 1, 2], [4, 3, -2, 1]],
}
_ALIASES = {"hole": "complex", "cp": "simple"}

BUILTIN_NAMES = tuple(_BUILTIN)


def builtin_structure(name: str) -> StructureMatrix:
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in _BUILTIN:
        raise InvalidArgument(f"unknown builtin structure {name!r}; choose from {sorted(_BUILTIN)}")
    return StructureMatrix(_BUILTIN[key])
