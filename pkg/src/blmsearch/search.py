"""Outer search loop: progressive, evolutionary and random search over structures."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .kg import TripleStore, build_filter_index
from .predictor import Predictor, fit_records, srf_features
from .scoring import HyperParams
from .structure import InvalidArgument, StructureMatrix, canonical_key, is_degenerate
from .training import train_structure

log = logging.getLogger(__name__)

ALGORITHMS = ("progressive", "evolutionary", "random")


@dataclass
class SearchConfig:
    algo: str = "evolutionary"
    N: int = 128
    P: int = 8
    I: int = 8
    b0: Optional[int] = None
    p_m: Optional[float] = None
    budget: int = 64
    seed: int = 0
    hp: HyperParams = field(default_factory=HyperParams)
    use_filter: bool = True
    use_predictor: bool = True
    workers: int = 1
    val_sample: Optional[int] = None
    record_timing: bool = False

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise InvalidArgument(f"algo must be one of {ALGORITHMS}")
        k = self.hp.k
        if self.b0 is None:
            self.b0 = k
        if self.p_m is None:
            self.p_m = 2.0 / k**2
        if self.P > self.N:
            raise InvalidArgument("P must not exceed N")
        if self.b0 < k or self.b0 > k * k:
            raise InvalidArgument(f"b0 must lie in [{k}, {k * k}]")
        if self.budget < self.I:
            raise InvalidArgument("budget must be at least I")
        if not 0 < self.p_m <= 1:
            raise InvalidArgument("p_m must lie in (0, 1]")

    @property
    def k(self) -> int:
        return self.hp.k


@dataclass
class SearchRecord:
    structure: StructureMatrix
    srf: np.ndarray = field(compare=False)  # derived from structure
    val_mrr: float
    hyperparams: HyperParams
    wall_clock_seconds: float = field(default=0.0, compare=False)
    round: int = 0
    index: int = 0
    val_h1: float = 0.0
    val_h10: float = 0.0
    final_train_loss: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        out = {
            "round": self.round,
            "index": self.index,
            "k": self.structure.k,
            "structure": self.structure.tolist(),
            "key": canonical_key(self.structure).hex(),
            "srf": [int(x) for x in self.srf],
            "val_mrr": self.val_mrr,
            "val_h1": self.val_h1,
            "val_h10": self.val_h10,
            "final_train_loss": self.final_train_loss,
            "hyperparams": self.hyperparams.to_dict(),
        }
        if timing:
            out["wall_clock_seconds"] = self.wall_clock_seconds
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SearchRecord":
        return cls(
            structure=StructureMatrix(d["structure"], k=d["k"]),
            srf=np.array(d["srf"], dtype=np.int8),
            val_mrr=float(d["val_mrr"]),
            hyperparams=HyperParams(**d["hyperparams"]),
            wall_clock_seconds=float(d.get("wall_clock_seconds", 0.0)),
            round=int(d["round"]),
            index=int(d["index"]),
            val_h1=float(d["val_h1"]),
            val_h10=float(d["val_h10"]),
            final_train_loss=float(d["final_train_loss"]),
        )


# ---------------------------------------------------------------------------
# Generators


def sample_initial(b0: int, k: int, rng: np.random.Generator) -> StructureMatrix:
    """``b0`` distinct cells, each a uniform value in ``{+-1, ..., +-k}``; zeros elsewhere."""
    if not 0 <= b0 <= k * k:
        raise InvalidArgument(f"b0={b0} outside [0, {k * k}]")
    cells = rng.choice(k * k, size=b0, replace=False)
    mags = rng.integers(1, k + 1, size=b0)
    signs = rng.choice(np.array([-1, 1]), size=b0)
    flat = np.zeros(k * k, dtype=np.int64)
    flat[cells] = mags * signs
    return StructureMatrix(flat.reshape(k, k))


def sample_initial_screened(b0: int, k: int, rng: np.random.Generator, batch: int = 1024) -> list[StructureMatrix]:
    """A batch of ``sample_initial`` draws, keeping those that pass cheap necessary checks.

    A kept draw uses every magnitude ``1..k`` and has no all-zero row or
    column.  Every discarded draw is degenerate anyway, so the kept draws
    are distributed exactly like rejection sampling against the full filter,
    at a tiny fraction of the cost.  May return an empty list.
    """
    if not 0 <= b0 <= k * k:
        raise InvalidArgument(f"b0={b0} outside [0, {k * k}]")
    cells = np.argsort(rng.random((batch, k * k)), axis=1)[:, :b0]
    mags = rng.integers(1, k + 1, size=(batch, b0))
    signs = rng.choice(np.array([-1, 1]), size=(batch, b0))
    flat = np.zeros((batch, k * k), dtype=np.int64)
    np.put_along_axis(flat, cells, mags * signs, axis=1)
    mats = flat.reshape(batch, k, k)
    nz = mats != 0
    ok = nz.any(axis=2).all(axis=1) & nz.any(axis=1).all(axis=1)
    for v in range(1, k + 1):
        ok &= (np.abs(flat) == v).any(axis=1)
    return [StructureMatrix(mats[i]) for i in np.flatnonzero(ok)]


def progressive_step(parent: StructureMatrix, rng: np.random.Generator) -> Optional[StructureMatrix]:
    """Add one signed term at a currently-zero cell; ``None`` if the parent is full."""
    k = parent.k
    flat = parent.entries.ravel().copy()
    zeros = np.flatnonzero(flat == 0)
    if len(zeros) == 0:
        return None
    cell = zeros[rng.integers(len(zeros))]
    flat[cell] = int(rng.integers(1, k + 1)) * (1 if rng.random() < 0.5 else -1)
    return StructureMatrix(flat.reshape(k, k))


def mutate(a: StructureMatrix, p_m: float, rng: np.random.Generator) -> StructureMatrix:
    """Each entry, with probability ``p_m``, moves to a uniform different value."""
    k = a.k
    flat = a.entries.ravel()
    hit = rng.random(flat.size) < p_m
    offset = rng.integers(1, 2 * k + 1, size=flat.size)
    moved = (flat + k + offset) % (2 * k + 1) - k
    return StructureMatrix(np.where(hit, moved, flat).reshape(k, k))


def crossover(a1: StructureMatrix, a2: StructureMatrix, rng: np.random.Generator) -> StructureMatrix:
    if a1.k != a2.k:
        raise InvalidArgument(f"crossover parents differ in k: {a1.k} vs {a2.k}")
    take_first = rng.random(a1.entries.shape) < 0.5
    return StructureMatrix(np.where(take_first, a1.entries, a2.entries))


def sample_uniform(k: int, rng: np.random.Generator) -> StructureMatrix:
    return StructureMatrix(rng.integers(-k, k + 1, size=(k, k)))


# ---------------------------------------------------------------------------
# Engine


class SearchEngine:
    """Shared state and bookkeeping for all three search algorithms.

    ``out_dir`` receives ``records.jsonl`` (flushed per record), ``curve.csv``
    and ``top_structures.json``.  With ``resume=True``, records already in
    ``records.jsonl`` are replayed instead of retrained; generation is
    deterministic, so the run continues exactly where it stopped.
    """

    def __init__(
        self,
        cfg: SearchConfig,
        dataset: TripleStore,
        out_dir: Optional[str] = None,
        resume: bool = False,
        trainer: Optional[Callable] = None,
    ):
        self.cfg = cfg
        self.dataset = dataset
        self.filter_index = build_filter_index(dataset)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB1]))
        self.history: set[bytes] = set()
        self.records: list[SearchRecord] = []
        self.predictor: Optional[Predictor] = None
        self.train_calls = 0
        self.best_so_far = -1.0
        self.start = time.perf_counter()
        self._trainer = trainer or self._train_one
        self._key_cache: dict[bytes, bytes] = {}
        self._srf_cache: dict[bytes, np.ndarray] = {}
        self._replay: dict[tuple, dict] = {}
        self.out_dir = out_dir
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            rec_path = os.path.join(out_dir, "records.jsonl")
            if resume and os.path.exists(rec_path):
                with open(rec_path) as f:
                    for line in f:
                        if line.strip():
                            d = json.loads(line)
                            self._replay[(d["round"], d["index"])] = d
            self._records_f = open(rec_path, "w")
            self._curve_f = open(os.path.join(out_dir, "curve.csv"), "w")
            self._curve_f.write("wall_clock_seconds,structures_trained,best_val_mrr_so_far\n")
        else:
            self._records_f = self._curve_f = None

    # -- helpers -----------------------------------------------------------

    @property
    def budget_used(self) -> int:
        return len(self.records)

    @property
    def remaining(self) -> int:
        return self.cfg.budget - self.budget_used

    def key(self, a: StructureMatrix) -> bytes:
        raw = a.raw_bytes()
        key = self._key_cache.get(raw)
        if key is None:
            key = self._key_cache[raw] = canonical_key(a)
        return key

    def srf(self, a: StructureMatrix) -> np.ndarray:
        key = self.key(a)
        feat = self._srf_cache.get(key)
        if feat is None:
            feat = self._srf_cache[key] = srf_features(a)
        return feat

    def accept(self, a: StructureMatrix, pending: set) -> bool:
        """Filter check against trained history plus the pending candidate set."""
        if not self.cfg.use_filter:
            return True
        if is_degenerate(a):
            return False
        key = self.key(a)
        if key in self.history or key in pending:
            return False
        pending.add(key)
        return True

    def collect(
        self, generate: Callable[[], Optional[StructureMatrix]], target: int, attempts: Optional[int] = None
    ) -> list[StructureMatrix]:
        """Up to ``target`` accepted candidates within ``attempts`` (default ``10 * N``) draws."""
        out: list[StructureMatrix] = []
        pending: set = set()
        for _ in range(attempts or 10 * self.cfg.N):
            if len(out) >= target:
                break
            a = generate()
            if a is not None and self.accept(a, pending):
                out.append(a)
        return out

    def select(self, candidates: list[StructureMatrix]) -> list[StructureMatrix]:
        take = min(self.cfg.P, self.remaining, len(candidates))
        if take <= 0:
            return []
        if self.cfg.use_predictor and self.predictor is not None:
            feats = np.array([self.srf(a) for a in candidates], dtype=np.float64)
            scores = self.predictor.predict(feats)
            order = sorted(range(len(candidates)), key=lambda i: -scores[i])
            return [candidates[i] for i in order[:take]]
        return candidates[:take]

    def refit(self) -> None:
        if self.cfg.use_predictor and self.records:
            self.predictor = fit_records(self.records, seed=self.cfg.seed)

    def candidate_hp(self, rnd: int, idx: int) -> HyperParams:
        seed = int(np.random.SeedSequence([self.cfg.seed, rnd, idx]).generate_state(1)[0])
        return self.cfg.hp.replace(seed=seed)

    def _train_one(self, a: StructureMatrix, hp: HyperParams):
        _, report = train_structure(
            a, self.dataset, hp, filter_index=self.filter_index, val_sample=self.cfg.val_sample
        )
        return report

    def evaluate_batch(self, structures: list[StructureMatrix], rnd: int) -> list[SearchRecord]:
        """Train each structure (optionally in worker threads) and record results in order."""
        structures = structures[: max(self.remaining, 0)]
        jobs = []
        for idx, a in enumerate(structures):
            hp = self.candidate_hp(rnd, idx)
            jobs.append((idx, a, hp, self._replay.get((rnd, idx))))

        def run(job):
            idx, a, hp, cached = job
            if cached is not None and cached["structure"] == a.tolist():
                return cached
            self.train_calls += 1
            return self._trainer(a, hp)

        if self.cfg.workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                results = list(pool.map(run, jobs))
        else:
            results = [run(j) for j in jobs]

        new = []
        for (idx, a, hp, _), res in zip(jobs, results):
            if isinstance(res, dict):
                rec = SearchRecord.from_dict(res)
            else:
                rec = SearchRecord(
                    structure=a,
                    srf=self.srf(a),
                    val_mrr=res.val_mrr,
                    hyperparams=hp,
                    wall_clock_seconds=res.wall_clock_seconds,
                    round=rnd,
                    index=idx,
                    val_h1=res.val_h1,
                    val_h10=res.val_h10,
                    final_train_loss=res.final_train_loss,
                )
            self._commit(rec)
            new.append(rec)
        return new

    def _commit(self, rec: SearchRecord) -> None:
        self.records.append(rec)
        self.history.add(self.key(rec.structure))
        self.best_so_far = max(self.best_so_far, rec.val_mrr)
        if self._records_f:
            self._records_f.write(json.dumps(rec.to_dict(self.cfg.record_timing)) + "\n")
            self._records_f.flush()
            self._curve_f.write(
                f"{time.perf_counter() - self.start:.3f},{self.budget_used},{self.best_so_far!r}\n"
            )
            self._curve_f.flush()

    def top(self, n: int, records=None) -> list[SearchRecord]:
        recs = self.records if records is None else records
        order = sorted(range(len(recs)), key=lambda i: -recs[i].val_mrr)
        return [recs[i] for i in order[:n]]

    def initial_population(self) -> list[SearchRecord]:
        cfg = self.cfg
        # Sparse initial tiers are mostly degenerate (at b0 = k only signed
        # permutation patterns survive), so with the filter on, draws are
        # pre-screened for the cheap necessary conditions.
        if cfg.use_filter:
            queue: list[StructureMatrix] = []

            def generate():
                # each screened survivor is one attempt; an empty batch is one too
                if not queue:
                    queue.extend(reversed(sample_initial_screened(cfg.b0, cfg.k, self.rng)))
                return queue.pop() if queue else None

        else:

            def generate():
                return sample_initial(cfg.b0, cfg.k, self.rng)

        found = self.collect(generate, cfg.I)
        return self.evaluate_batch(found, rnd=0)

    def finish(self, result: list[SearchRecord]) -> list[SearchRecord]:
        if self.out_dir:
            with open(os.path.join(self.out_dir, "top_structures.json"), "w") as f:
                json.dump([r.to_dict() for r in result], f, indent=1)
            self.close()
        return result

    def close(self) -> None:
        for fh in (self._records_f, self._curve_f):
            if fh and not fh.closed:
                fh.close()

    # -- algorithms --------------------------------------------------------

    def progressive(self) -> list[SearchRecord]:
        cfg, k = self.cfg, self.cfg.k
        tiers: dict[int, list[SearchRecord]] = {cfg.b0: self.initial_population()}
        self.refit()
        b, rnd = cfg.b0, 0
        while self.remaining > 0 and b < k * k:
            b += 1
            rnd += 1
            source_b = max((t for t, recs in tiers.items() if recs and t < b), default=None)
            if source_b is None:
                break
            parents = self.top(cfg.I, tiers[source_b])

            def generate():
                child = parents[self.rng.integers(len(parents))].structure
                while child is not None and child.nnz < b:
                    child = progressive_step(child, self.rng)
                return child

            candidates = self.collect(generate, cfg.N)
            if not candidates:
                tiers[b] = []
                continue
            tiers[b] = self.evaluate_batch(self.select(candidates), rnd)
            self.refit()
        return self.top(cfg.I)

    def evolutionary(self) -> list[SearchRecord]:
        cfg = self.cfg
        population = list(self.initial_population())
        rnd = 0
        stalled = 0
        while self.remaining > 0 and population:
            rnd += 1
            self.refit()

            def generate():
                if self.rng.random() < 0.5:
                    parent = population[self.rng.integers(len(population))].structure
                    return mutate(parent, cfg.p_m, self.rng)
                i, j = self.rng.integers(len(population), size=2)
                return crossover(population[i].structure, population[j].structure, self.rng)

            candidates = self.collect(generate, cfg.N)
            chosen = self.select(candidates)
            if not chosen:
                stalled += 1
                if stalled >= 3:
                    break
                continue
            stalled = 0
            for rec in self.evaluate_batch(chosen, rnd):
                worst = min(range(len(population)), key=lambda i: population[i].val_mrr)
                if rec.val_mrr > population[worst].val_mrr:
                    population[worst] = rec
        return sorted(population, key=lambda r: -r.val_mrr)

    def random(self) -> list[SearchRecord]:
        cfg = self.cfg
        rnd = 0
        stalled = 0
        while self.remaining > 0:
            batch = self.collect(lambda: sample_uniform(cfg.k, self.rng), min(cfg.P, self.remaining))
            if not batch:
                stalled += 1
                if stalled >= 3:
                    break
                continue
            self.evaluate_batch(batch, rnd)
            rnd += 1
        return self.top(cfg.I)

    def run(self) -> list[SearchRecord]:
        try:
            result = getattr(self, self.cfg.algo)()
        finally:
            self.close()
        return self.finish(result)


def progressive_search(cfg: SearchConfig, dataset: TripleStore, **kwargs) -> list[SearchRecord]:
    cfg.algo = "progressive"
    return SearchEngine(cfg, dataset, **kwargs).run()


def evolutionary_search(cfg: SearchConfig, dataset: TripleStore, **kwargs) -> list[SearchRecord]:
    cfg.algo = "evolutionary"
    return SearchEngine(cfg, dataset, **kwargs).run()


def random_search(cfg: SearchConfig, dataset: TripleStore, **kwargs) -> list[SearchRecord]:
    cfg.algo = "random"
    return SearchEngine(cfg, dataset, **kwargs).run()
