"""Inner loop: full-softmax training with AdaGrad, and filtered ranking evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .kg import FilterIndex, TripleStore, build_filter_index
from .scoring import EmbeddingStore, HyperParams, apply_batch, init_embeddings, relation_grad
from .structure import StructureMatrix

log = logging.getLogger(__name__)

ADAGRAD_EPS = 1e-10


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class Gradients:
    entity: np.ndarray
    relation: np.ndarray


@dataclass
class EvalReport:
    mrr: float
    h_at: dict
    head_ranks: np.ndarray = field(repr=False)
    tail_ranks: np.ndarray = field(repr=False)

    def to_dict(self, ranks: bool = False) -> dict:
        out = {"mrr": self.mrr, "h_at": {str(k): v for k, v in self.h_at.items()}}
        if ranks:
            out["head_ranks"] = self.head_ranks.tolist()
            out["tail_ranks"] = self.tail_ranks.tolist()
        return out


@dataclass
class TrainReport:
    final_train_loss: float
    val_mrr: float
    val_h1: float
    val_h10: float
    epochs_run: int
    wall_clock_seconds: float = field(default=0.0, compare=False)
    curve: list = field(default_factory=list, compare=False, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("curve")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "val_mrr", "seconds"])
            w.writerows(self.curve)


def _log_softmax_grad(scores: np.ndarray, targets: np.ndarray):
    """Per-row cross-entropy and its gradient w.r.t. the scores."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    norm = expd.sum(axis=1, keepdims=True)
    rows = np.arange(len(scores))
    loss = np.log(norm[:, 0]) - shifted[rows, targets]
    grad = expd / norm
    grad[rows, targets] -= 1.0
    return loss, grad


def batch_loss(a: StructureMatrix, store: EmbeddingStore, batch, lam: float, with_grad: bool = True):
    """Summed tail- and head-direction cross-entropy over all entities plus squared L2.

    Returns ``(loss, Gradients)`` where gradients are dense arrays shaped like
    the store (rows not touched by the batch are zero, except that every
    entity row receives the softmax gradient).
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
    E = store.entity
    H, R, T = E[h], store.relation[r], E[t]
    tail_q = apply_batch(a, R, H, transpose=True)
    head_q = apply_batch(a, R, T)
    ce_t, g_t = _log_softmax_grad(tail_q @ E.T, t)
    ce_h, g_h = _log_softmax_grad(head_q @ E.T, h)
    reg = lam * float(np.sum(H * H) + np.sum(R * R) + np.sum(T * T))
    loss = float(ce_t.sum() + ce_h.sum()) + reg
    if not with_grad:
        return loss, None

    d_tail_q = g_t @ E
    d_head_q = g_h @ E
    d_ent = g_t.T @ tail_q + g_h.T @ head_q
    dH = apply_batch(a, R, d_tail_q) + 2 * lam * H
    dT = apply_batch(a, R, d_head_q, transpose=True) + 2 * lam * T
    dR = relation_grad(a, H, d_tail_q, transpose=True) + relation_grad(a, T, d_head_q) + 2 * lam * R
    np.add.at(d_ent, h, dH)
    np.add.at(d_ent, t, dT)
    d_rel = np.zeros_like(store.relation)
    np.add.at(d_rel, r, dR)
    return loss, Gradients(d_ent, d_rel)


def adagrad_step(store: EmbeddingStore, accumulators: Gradients, grads: Gradients, eta: float) -> None:
    """In-place AdaGrad update of both embedding tables."""
    for name in ("entity", "relation"):
        g = getattr(grads, name)
        acc = getattr(accumulators, name)
        acc += g * g
        param = getattr(store, name)
        param -= eta * g / (np.sqrt(acc) + ADAGRAD_EPS)


def zero_accumulators(store: EmbeddingStore) -> Gradients:
    return Gradients(np.zeros_like(store.entity), np.zeros_like(store.relation))


# ---------------------------------------------------------------------------
# Evaluation


def _filtered_ranks(scores: np.ndarray, targets: np.ndarray, known: list) -> np.ndarray:
    rows = np.arange(len(scores))
    true = scores[rows, targets].copy()
    masked = scores.copy()
    for b, ents in enumerate(known):
        if ents:
            masked[b, list(ents)] = -np.inf
    # the true entity is itself a known answer, hence masked: +1 restores it
    return (masked >= true[:, None]).sum(axis=1) + 1


def ranks_to_report(head_ranks, tail_ranks, hits=(1, 3, 10)) -> EvalReport:
    head_ranks = np.asarray(head_ranks, dtype=np.int64)
    tail_ranks = np.asarray(tail_ranks, dtype=np.int64)
    allr = np.concatenate([head_ranks, tail_ranks])
    if len(allr) == 0:
        return EvalReport(0.0, {k: 0.0 for k in hits}, head_ranks, tail_ranks)
    mrr = float(np.mean(1.0 / allr))
    return EvalReport(mrr, {k: float(np.mean(allr <= k)) for k in hits}, head_ranks, tail_ranks)


def evaluate(
    a: StructureMatrix,
    store: EmbeddingStore,
    triples: np.ndarray,
    filter_index: Optional[FilterIndex],
    chunk: int = 512,
) -> EvalReport:
    """Filtered head and tail ranks (ties count against the true entity)."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    head_ranks, tail_ranks = [], []
    E = store.entity
    for start in range(0, len(triples), chunk):
        part = triples[start : start + chunk]
        h, r, t = part[:, 0], part[:, 1], part[:, 2]
        R = store.relation[r]
        tail_scores = apply_batch(a, R, E[h], transpose=True) @ E.T
        head_scores = apply_batch(a, R, E[t]) @ E.T
        if filter_index is None:
            known_t = [{int(x)} for x in t]
            known_h = [{int(x)} for x in h]
        else:
            known_t = [filter_index.tails(int(hh), int(rr)) | {int(tt)} for hh, rr, tt in part]
            known_h = [filter_index.heads(int(rr), int(tt)) | {int(hh)} for hh, rr, tt in part]
        tail_ranks.append(_filtered_ranks(tail_scores, t, known_t))
        head_ranks.append(_filtered_ranks(head_scores, h, known_h))
    if not head_ranks:
        return ranks_to_report([], [])
    return ranks_to_report(np.concatenate(head_ranks), np.concatenate(tail_ranks))


# ---------------------------------------------------------------------------
# Training


def train_structure(
    a: StructureMatrix,
    dataset: TripleStore,
    hp: HyperParams,
    store_init: Optional[EmbeddingStore] = None,
    filter_index: Optional[FilterIndex] = None,
    eval_every: int = 0,
    val_sample: Optional[int] = None,
    patience: int = 0,
):
    """Train embeddings for a fixed structure and report validation metrics.

    ``eval_every > 0`` records validation MRR every that many epochs in the
    curve; ``patience > 0`` (with ``eval_every``) stops after that many
    evaluations without improvement.
    """
    start = time.perf_counter()
    store = store_init.copy() if store_init is not None else init_embeddings(
        dataset.n_entities, dataset.n_relations, hp
    )
    if filter_index is None:
        filter_index = build_filter_index(dataset)
    acc = zero_accumulators(store)
    rng = np.random.default_rng(hp.seed)
    train = dataset.train
    valid = dataset.valid
    if val_sample is not None and val_sample < len(valid):
        valid = valid[np.sort(rng.choice(len(valid), val_sample, replace=False))]
    epoch_loss = float("nan")
    best, stale, epochs_run = -1.0, 0, 0
    curve = []
    for epoch in range(hp.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for b, lo in enumerate(range(0, len(order), hp.batch_size)):
            batch = train[order[lo : lo + hp.batch_size]]
            loss, grads = batch_loss(a, store, batch, hp.lam)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss for structure {a.tolist()} at epoch {epoch}, batch {b}")
            adagrad_step(store, acc, grads, hp.eta)
            total += loss
        epoch_loss = total / max(len(train), 1)
        epochs_run = epoch + 1
        if eval_every and epochs_run % eval_every == 0:
            mrr = evaluate(a, store, valid, filter_index).mrr
            curve.append((epochs_run, epoch_loss, mrr, time.perf_counter() - start))
            if patience:
                if mrr > best:
                    best, stale = mrr, 0
                else:
                    stale += 1
                    if stale >= patience:
                        break
        else:
            curve.append((epochs_run, epoch_loss, "", time.perf_counter() - start))
    rep = evaluate(a, store, valid, filter_index)
    report = TrainReport(
        final_train_loss=epoch_loss,
        val_mrr=rep.mrr,
        val_h1=rep.h_at[1],
        val_h10=rep.h_at[10],
        epochs_run=epochs_run,
        wall_clock_seconds=time.perf_counter() - start,
        curve=curve,
    )
    log.debug("trained %s: loss=%.4f val_mrr=%.4f", a.tolist(), epoch_loss, rep.mrr)
    return store, report


# ---------------------------------------------------------------------------
# Multi-hop path queries


def path_batch_loss(
    a: StructureMatrix,
    store: EmbeddingStore,
    starts: np.ndarray,
    paths: np.ndarray,
    targets: np.ndarray,
    lam: float,
    with_grad: bool = True,
    negatives: Optional[np.ndarray] = None,
):
    """Cross-entropy of the true terminal for a batch of paths.

    ``paths`` has shape ``(B, L)``.  By default the softmax runs over all
    entities, and with ``L = 1`` this is the tail half of :func:`batch_loss`.
    ``negatives`` of shape ``(B, n)`` restricts each row's softmax to the true
    terminal plus those sampled entities.
    """
    starts = np.asarray(starts, dtype=np.int64)
    paths = np.asarray(paths, dtype=np.int64).reshape(len(starts), -1)
    targets = np.asarray(targets, dtype=np.int64)
    E = store.entity
    qs = [E[starts]]
    rels = [store.relation[paths[:, step]] for step in range(paths.shape[1])]
    for R in rels:
        qs.append(apply_batch(a, R, qs[-1], transpose=True))
    q = qs[-1]
    if negatives is None:
        ce, g = _log_softmax_grad(q @ E.T, targets)
    else:
        cand = np.concatenate([targets[:, None], np.asarray(negatives, dtype=np.int64)], axis=1)
        ce, g = _log_softmax_grad(np.einsum("bd,bnd->bn", q, E[cand]), np.zeros(len(q), dtype=np.int64))
    reg = lam * float(np.sum(qs[0] ** 2) + sum(np.sum(R * R) for R in rels) + np.sum(E[targets] ** 2))
    loss = float(ce.sum()) + reg
    if not with_grad:
        return loss, None
    d_rel = np.zeros_like(store.relation)
    if negatives is None:
        d_ent = g.T @ q
        dq = g @ E
    else:
        d_ent = np.zeros_like(E)
        np.add.at(d_ent, cand, g[:, :, None] * q[:, None, :])
        dq = np.einsum("bn,bnd->bd", g, E[cand])
    for step in reversed(range(len(rels))):
        R = rels[step]
        dR = relation_grad(a, qs[step], dq, transpose=True) + 2 * lam * R
        np.add.at(d_rel, paths[:, step], dR)
        dq = apply_batch(a, R, dq)
    np.add.at(d_ent, starts, dq + 2 * lam * qs[0])
    np.add.at(d_ent, targets, 2 * lam * E[targets])
    return loss, Gradients(d_ent, d_rel)


def train_paths(
    a: StructureMatrix,
    n_entities: int,
    n_relations: int,
    queries,
    hp: HyperParams,
    store_init: Optional[EmbeddingStore] = None,
    negatives: int = 0,
):
    """Train embeddings on path queries ``(e0, relations, e_last)`` of one length.

    ``negatives = 0`` uses the full softmax over entities; a positive value
    samples that many uniform negative terminals per query instead.
    """
    start = time.perf_counter()
    store = store_init.copy() if store_init is not None else init_embeddings(n_entities, n_relations, hp)
    starts = np.array([q[0] for q in queries], dtype=np.int64)
    paths = np.array([list(q[1]) for q in queries], dtype=np.int64)
    targets = np.array([q[2] for q in queries], dtype=np.int64)
    acc = zero_accumulators(store)
    rng = np.random.default_rng(hp.seed)
    epoch_loss = float("nan")
    for epoch in range(hp.epochs):
        order = rng.permutation(len(starts))
        total = 0.0
        for b, lo in enumerate(range(0, len(order), hp.batch_size)):
            idx = order[lo : lo + hp.batch_size]
            neg = rng.integers(n_entities, size=(len(idx), negatives)) if negatives > 0 else None
            loss, grads = path_batch_loss(a, store, starts[idx], paths[idx], targets[idx], hp.lam, negatives=neg)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss for structure {a.tolist()} at epoch {epoch}, batch {b}")
            adagrad_step(store, acc, grads, hp.eta)
            total += loss
        epoch_loss = total / max(len(starts), 1)
    return store, {"final_train_loss": epoch_loss, "seconds": time.perf_counter() - start}
