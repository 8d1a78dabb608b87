"""Triple stores: loading, filtered-candidate indexes, relation profiling, synthetic KGs."""

from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SPLITS = ("train", "valid", "test")


class DataError(Exception):
    """Malformed or missing dataset files."""


class MissingFileError(DataError, FileNotFoundError):
    """A required dataset file does not exist."""


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class Vocab:
    """Dense name <-> id map assigned by first appearance."""

    def __init__(self, names=()):
        self.names: list[str] = []
        self.ids: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        idx = self.ids.get(name)
        if idx is None:
            idx = self.ids[name] = len(self.names)
            self.names.append(name)
        return idx

    def __len__(self):
        return len(self.names)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.names == other.names


@dataclass
class TripleStore:
    entities: Vocab
    relations: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def __eq__(self, other):
        return (
            isinstance(other, TripleStore)
            and self.entities == other.entities
            and self.relations == other.relations
            and all(np.array_equal(self.split(s), other.split(s)) for s in SPLITS)
        )


def _as_triples(rows) -> np.ndarray:
    arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return arr


def _read_split(path, entities: Vocab, relations: Vocab) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingFileError(f"missing split file: {path}")
    rows, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = (p.strip() for p in parts)
            trip = (entities.add(h), relations.add(r), entities.add(t))
            if trip not in seen:
                seen.add(trip)
                rows.append(trip)
    return _as_triples(rows)


def _read_vocab(path) -> Vocab:
    vocab = Vocab()
    if not os.path.exists(path):
        return vocab
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, lineno, "expected name<TAB>id")
            try:
                idx = int(parts[1])
            except ValueError:
                raise ParseError(path, lineno, f"id {parts[1]!r} is not an integer") from None
            if idx != len(vocab) or parts[0] in vocab.ids:
                raise ParseError(path, lineno, "ids must be dense, unique and in order")
            vocab.add(parts[0])
    return vocab


def load_dataset(path) -> TripleStore:
    """Load ``train.txt``, ``valid.txt`` and ``test.txt`` from a directory.

    Ids follow ``entities.tsv`` / ``relations.tsv`` when present (as written
    by :func:`save_dataset`); names not listed there, or all names when the
    files are absent, get ids by first appearance.
    """
    entities = _read_vocab(os.path.join(path, "entities.tsv"))
    relations = _read_vocab(os.path.join(path, "relations.tsv"))
    splits = {s: _read_split(os.path.join(path, f"{s}.txt"), entities, relations) for s in SPLITS}
    return TripleStore(entities, relations, **splits)


def save_dataset(store: TripleStore, path) -> None:
    """Write the three split files plus ``entities.tsv`` / ``relations.tsv`` (name<TAB>id)."""
    os.makedirs(path, exist_ok=True)
    ent, rel = store.entities.names, store.relations.names
    for s in SPLITS:
        with open(os.path.join(path, f"{s}.txt"), "w", encoding="utf-8") as f:
            for h, r, t in store.split(s):
                f.write(f"{ent[h]}\t{rel[r]}\t{ent[t]}\n")
    for fname, names in (("entities.tsv", ent), ("relations.tsv", rel)):
        with open(os.path.join(path, fname), "w", encoding="utf-8") as f:
            for i, n in enumerate(names):
                f.write(f"{n}\t{i}\n")


@dataclass
class FilterIndex:
    tails_of: dict = field(default_factory=lambda: defaultdict(set))
    heads_of: dict = field(default_factory=lambda: defaultdict(set))

    def tails(self, h: int, r: int) -> set:
        return self.tails_of.get((h, r), set())

    def heads(self, r: int, t: int) -> set:
        return self.heads_of.get((r, t), set())


def build_filter_index(store: TripleStore) -> FilterIndex:
    tails, heads = defaultdict(set), defaultdict(set)
    for h, r, t in store.all_triples().tolist():
        tails[(h, r)].add(t)
        heads[(r, t)].add(h)
    return FilterIndex(dict(tails), dict(heads))


# ---------------------------------------------------------------------------
# Relation profiling


@dataclass
class RelationStats:
    relation: int
    n_triples: int
    n_reversed: int
    symmetric: bool
    anti_symmetric: bool
    general_asymmetric: bool
    inverse_of: Optional[int] = None

    @property
    def inverse(self) -> bool:
        return self.inverse_of is not None


def profile_relations(store: TripleStore, split: str = "train") -> list[RelationStats]:
    """Classify each relation by how many of its triples appear reversed.

    Symmetric: more than half reversed within the same relation; anti-symmetric:
    none reversed; otherwise general asymmetric.  Inverse: some other relation
    contains the reversal of more than half of this relation's triples.
    """
    triples = store.split(split)
    by_rel: dict[int, set] = defaultdict(set)
    for h, r, t in triples.tolist():
        by_rel[r].add((h, t))
    out = []
    for r in range(store.n_relations):
        pairs = by_rel.get(r, set())
        n = len(pairs)
        rev = sum((t, h) in pairs for h, t in pairs)
        sym = n > 0 and rev > n / 2
        anti = n > 0 and rev == 0
        stats = RelationStats(r, n, rev, sym, anti, not (sym or anti))
        best, best_count = None, 0
        for r2, pairs2 in by_rel.items():
            if r2 == r or not n:
                continue
            c = sum((t, h) in pairs2 for h, t in pairs)
            if c > n / 2 and c > best_count:
                best, best_count = r2, c
        stats.inverse_of = best
        out.append(stats)
    return out


# ---------------------------------------------------------------------------
# Synthetic KGs

RELATION_TYPES = ("symmetric", "anti_symmetric", "inverse-pair")


def generate_synthetic_kg(spec: dict, seed: int = 0) -> TripleStore:
    """Deterministic toy KG whose relations follow declared patterns.

    Entities are split into latent groups so that relations are learnable:
    a symmetric relation links entities of paired groups in both
    directions; an anti-symmetric relation links group g to group g+1 (mod
    G, G >= 3) only; an inverse pair is an anti-symmetric relation plus its
    exact reversal under a second relation.  ``spec`` is
    ``{"n_entities": int, "relations": [{"type": ..., "n_triples": int}],
    "n_groups": optional int}``.  Splits are an 80/10/10 random partition;
    both directions of a symmetric edge go to the same split.
    """
    n_ent = int(spec["n_entities"])
    if n_ent < 4:
        raise ValueError("n_entities must be at least 4")
    n_groups = int(spec.get("n_groups", max(3, n_ent // 10)))
    rng = np.random.default_rng(seed)
    group = rng.permutation(n_ent) % n_groups
    members = [np.flatnonzero(group == g) for g in range(n_groups)]

    entities = Vocab(f"e{i}" for i in range(n_ent))
    relations = Vocab()
    units: list[list[tuple[int, int, int]]] = []

    def sample_pairs(n, src_of, symmetric):
        pairs = set()
        attempts = 0
        while len(pairs) < n and attempts < 50 * n + 1000:
            attempts += 1
            h = int(rng.integers(n_ent))
            t = int(rng.choice(members[src_of(group[h])]))
            if h == t or (h, t) in pairs or (symmetric and (t, h) in pairs):
                continue
            pairs.add((h, t))
        return sorted(pairs)

    for n, rel in enumerate(spec["relations"]):
        kind = rel["type"]
        count = int(rel["n_triples"])
        if count < 1:
            raise ValueError("n_triples must be positive")
        if kind == "symmetric":
            r = relations.add(f"sym{n}")
            partner = rng.permutation(n_groups)
            # an involution on groups keeps the relation symmetric at group level
            match = np.arange(n_groups)
            for a, b in zip(partner[0::2], partner[1::2]):
                match[a], match[b] = b, a
            for h, t in sample_pairs(max(1, count // 2), lambda g: match[g], True):
                units.append([(h, r, t), (t, r, h)])
        elif kind == "anti_symmetric":
            r = relations.add(f"anti{n}")
            shift = int(rng.integers(1, n_groups)) if n_groups > 3 else 1
            if 2 * shift % n_groups == 0:
                shift = 1
            for h, t in sample_pairs(count, lambda g: (g + shift) % n_groups, False):
                units.append([(h, r, t)])
        elif kind == "inverse-pair":
            r = relations.add(f"inv{n}a")
            r2 = relations.add(f"inv{n}b")
            shift = int(rng.integers(1, n_groups)) if n_groups > 3 else 1
            if 2 * shift % n_groups == 0:
                shift = 1
            for h, t in sample_pairs(max(1, count // 2), lambda g: (g + shift) % n_groups, False):
                units.append([(h, r, t)])
                units.append([(t, r2, h)])
        else:
            raise ValueError(f"unknown relation type {kind!r}; expected one of {RELATION_TYPES}")

    order = rng.permutation(len(units))
    n_train = int(round(0.8 * len(units)))
    n_valid = int(round(0.1 * len(units)))
    buckets = {"train": [], "valid": [], "test": []}
    for pos, u in enumerate(order):
        name = "train" if pos < n_train else "valid" if pos < n_train + n_valid else "test"
        buckets[name].extend(units[u])
    splits = {s: _as_triples(sorted(v)) for s, v in buckets.items()}
    return TripleStore(entities, relations, **splits)
