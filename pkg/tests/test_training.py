import math

import numpy as np
import pytest

from blmsearch.kg import build_filter_index, generate_synthetic_kg
from blmsearch.scoring import EmbeddingStore, HyperParams, score_triple
from blmsearch.structure import BUILTIN_NAMES, builtin_structure, flip_signs, permute_indices, permute_values
from blmsearch.training import (
    EvalReport,
    Gradients,
    NumericError,
    TrainReport,
    adagrad_step,
    batch_loss,
    evaluate,
    path_batch_loss,
    train_paths,
    train_structure,
    zero_accumulators,
)

from helpers import brute_force_ranks, make_store, random_structure


def toy_store(rng, n_e=5, n_r=2, d=8, k=4, scale=0.5):
    return EmbeddingStore(scale * rng.normal(size=(n_e, d)), scale * rng.normal(size=(n_r, d)), k)


def finite_difference_check(loss_fn, store, step=1e-6):
    """Max relative error between analytic and central-difference gradients."""
    _, grads = loss_fn(store)
    worst = 0.0
    for name in ("entity", "relation"):
        param = getattr(store, name)
        analytic = getattr(grads, name)
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + step
            up = loss_fn(store)[0]
            param[idx] = old - step
            down = loss_fn(store)[0]
            param[idx] = old
            numeric[idx] = (up - down) / (2 * step)
        denom = np.maximum(np.abs(numeric) + np.abs(analytic), 1e-6)
        worst = max(worst, float(np.max(np.abs(numeric - analytic) / denom)))
    return worst


def toy_kg(n=20, n_triples=60, seed=0):
    rng = np.random.default_rng(seed)
    pairs = set()
    while len(pairs) < n_triples // 2:
        h, t = rng.choice(n, 2, replace=False)
        pairs.add((min(h, t), max(h, t)))
    train = [(h, 0, t) for h, t in sorted(pairs)] + [(t, 0, h) for h, t in sorted(pairs)]
    return make_store(train, valid=train[:10], n_entities=n, n_relations=1)


class TestBatchLoss:
    def test_uniform_scores(self):
        store = EmbeddingStore(np.zeros((5, 8)), np.zeros((1, 8)), 4)
        loss, _ = batch_loss(builtin_structure("complex"), store, [(0, 0, 1)], lam=0.1)
        assert math.isclose(loss, 2 * math.log(5))

    def test_duplicate_doubles_contribution(self):
        rng = np.random.default_rng(0)
        store = toy_store(rng)
        a = builtin_structure("simple")
        single, _ = batch_loss(a, store, [(0, 1, 2)], lam=0.0)
        double, g2 = batch_loss(a, store, [(0, 1, 2), (0, 1, 2)], lam=0.0)
        _, g1 = batch_loss(a, store, [(0, 1, 2)], lam=0.0)
        assert math.isclose(double, 2 * single)
        assert np.allclose(g2.entity, 2 * g1.entity)

    def test_regularizer(self):
        rng = np.random.default_rng(1)
        store = toy_store(rng)
        a = builtin_structure("quate")
        l0, _ = batch_loss(a, store, [(0, 1, 2)], lam=0.0)
        l1, _ = batch_loss(a, store, [(0, 1, 2)], lam=0.5)
        reg = np.sum(store.entity[0] ** 2) + np.sum(store.relation[1] ** 2) + np.sum(store.entity[2] ** 2)
        assert math.isclose(l1 - l0, 0.5 * reg, rel_tol=1e-12)

    def test_loss_matches_score_loop(self):
        rng = np.random.default_rng(2)
        store = toy_store(rng)
        a = random_structure(rng)
        h, r, t = 3, 0, 1
        tails = np.array([score_triple(a, store, h, r, e) for e in range(5)])
        heads = np.array([score_triple(a, store, e, r, t) for e in range(5)])
        want = -(tails[t] - np.log(np.exp(tails).sum())) - (heads[h] - np.log(np.exp(heads).sum()))
        assert math.isclose(batch_loss(a, store, [(h, r, t)], lam=0.0)[0], want, rel_tol=1e-12)

    @pytest.mark.parametrize("name", BUILTIN_NAMES)
    def test_gradients_builtin(self, name):
        rng = np.random.default_rng(3)
        store = toy_store(rng)
        batch = [(0, 0, 1), (2, 1, 3), (4, 0, 0), (1, 1, 1)]
        fn = lambda s: batch_loss(builtin_structure(name), s, batch, lam=0.01)
        # h=1e-5 keeps cancellation error (~eps*|loss|/h) below 1e-5 relative
        # even on gradient components of order 1e-5
        assert finite_difference_check(fn, store, step=1e-5) < 1e-5

    def test_gradients_random_structures(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            a = random_structure(rng)
            store = toy_store(rng)
            batch = rng.integers(0, [5, 2, 5], size=(3, 3))
            fn = lambda s: batch_loss(a, s, batch, lam=0.0)
            assert finite_difference_check(fn, store) < 1e-5


class TestPathLoss:
    def test_single_hop_equals_tail_half(self):
        rng = np.random.default_rng(5)
        store = toy_store(rng)
        a = random_structure(rng)
        loss, _ = path_batch_loss(a, store, [0, 2], [[1], [0]], [3, 4], lam=0.0)
        tails = [np.array([score_triple(a, store, h, r, e) for e in range(5)]) for h, r in ((0, 1), (2, 0))]
        want = sum(np.log(np.exp(s).sum()) - s[t] for s, t in zip(tails, (3, 4)))
        assert math.isclose(loss, want, rel_tol=1e-12)

    @pytest.mark.parametrize("L", [1, 2, 3])
    def test_gradients(self, L):
        rng = np.random.default_rng(6 + L)
        store = toy_store(rng, n_r=3)
        a = random_structure(rng)
        starts = [0, 3]
        paths = rng.integers(0, 3, size=(2, L))
        fn = lambda s: path_batch_loss(a, s, starts, paths, [1, 4], lam=0.01)
        assert finite_difference_check(fn, store) < 1e-5

    def test_gradients_sampled_negatives(self):
        rng = np.random.default_rng(9)
        store = toy_store(rng, n_r=3)
        a = random_structure(rng)
        neg = np.array([[2, 3, 2], [0, 1, 2]])
        fn = lambda s: path_batch_loss(a, s, [0, 3], [[0, 1], [2, 2]], [1, 4], lam=0.01, negatives=neg)
        assert finite_difference_check(fn, store) < 1e-5

    def test_train_paths_reduces_loss(self):
        rng = np.random.default_rng(10)
        queries = [(int(rng.integers(20)), (0, 1), int(rng.integers(20))) for _ in range(40)]
        hp = HyperParams(d=16, k=4, eta=0.3, lam=1e-4, batch_size=16, epochs=50, seed=0)
        _, first = train_paths(builtin_structure("complex"), 20, 2, queries, hp.replace(epochs=1))
        _, last = train_paths(builtin_structure("complex"), 20, 2, queries, hp)
        assert last["final_train_loss"] < first["final_train_loss"]


class TestAdagrad:
    def _single(self, value):
        return EmbeddingStore(np.full((1, 4), value, dtype=float), np.zeros((1, 4)), 4)

    def test_zero_gradient(self):
        store = self._single(1.0)
        adagrad_step(store, zero_accumulators(store), Gradients(np.zeros((1, 4)), np.zeros((1, 4))), 0.1)
        assert np.all(store.entity == 1.0)

    def test_first_step_closed_form(self):
        store = self._single(0.0)
        adagrad_step(store, zero_accumulators(store), Gradients(np.ones((1, 4)), np.zeros((1, 4))), 0.1)
        assert np.allclose(store.entity, -0.1 / (1 + 1e-10), rtol=0, atol=1e-15)

    def test_steps_shrink(self):
        store = self._single(0.0)
        acc = zero_accumulators(store)
        g = Gradients(np.ones((1, 4)), np.zeros((1, 4)))
        adagrad_step(store, acc, g, 0.1)
        first = store.entity.copy()
        adagrad_step(store, acc, g, 0.1)
        assert np.all(np.abs(store.entity - first) < np.abs(first))


class TestEvaluate:
    def test_unique_max_rank_one(self):
        ent = np.array([[1.0, 0, 0, 0], [0, 0, 0, 0], [2.0, 0, 0, 0]])
        store = EmbeddingStore(ent, np.ones((1, 4)), 4)
        kg = make_store([(0, 0, 2)], n_entities=3, n_relations=1)
        rep = evaluate(builtin_structure("distmult"), store, kg.train, build_filter_index(kg))
        assert rep.tail_ranks.tolist() == [1]

    def test_ties_count_against_truth(self):
        store = EmbeddingStore(np.zeros((5, 4)), np.zeros((1, 4)), 4)
        kg = make_store([], test=[(0, 0, 1)], n_entities=5, n_relations=1)
        rep = evaluate(builtin_structure("distmult"), store, kg.test, build_filter_index(kg))
        assert rep.tail_ranks.tolist() == [5] and rep.head_ranks.tolist() == [5]
        assert math.isclose(rep.mrr, 0.2)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            a = random_structure(rng)
            store = toy_store(rng, n_e=6, n_r=2)
            triples = rng.integers(0, [6, 2, 6], size=(12, 3))
            kg = make_store(triples[:8], triples[8:10], triples[10:], n_entities=6, n_relations=2)
            rep = evaluate(a, store, kg.test, build_filter_index(kg), chunk=1)
            fn = lambda h, r, t: score_triple(a, store, h, r, t)
            heads, tails = brute_force_ranks(fn, 6, kg.test, kg.all_triples())
            assert rep.head_ranks.tolist() == heads.tolist()
            assert rep.tail_ranks.tolist() == tails.tolist()

    def test_filtered_not_worse_than_raw(self):
        rng = np.random.default_rng(12)
        a = builtin_structure("complex")
        store = toy_store(rng, n_e=6)
        triples = rng.integers(0, [6, 2, 6], size=(20, 3))
        kg = make_store(triples, test=triples[:5], n_entities=6, n_relations=2)
        filt = evaluate(a, store, kg.test, build_filter_index(kg))
        raw = evaluate(a, store, kg.test, None)
        assert np.all(filt.tail_ranks <= raw.tail_ranks) and np.all(filt.head_ranks <= raw.head_ranks)

    def test_report_invariants(self):
        rng = np.random.default_rng(13)
        store = toy_store(rng, n_e=30)
        kg = make_store(rng.integers(0, [30, 2, 30], size=(40, 3)), n_entities=30, n_relations=2)
        rep = evaluate(builtin_structure("analogy"), store, kg.train, build_filter_index(kg))
        assert 0 <= rep.mrr <= 1
        assert rep.h_at[1] <= rep.h_at[3] <= rep.h_at[10]
        assert rep.head_ranks.min() >= 1 and rep.tail_ranks.min() >= 1
        assert math.isclose(rep.mrr, np.mean(1 / np.concatenate([rep.head_ranks, rep.tail_ranks])))

    def test_empty(self):
        rep = evaluate(builtin_structure("complex"), toy_store(np.random.default_rng(0)), np.zeros((0, 3)), None)
        assert isinstance(rep, EvalReport) and rep.mrr == 0.0


class TestTrainStructure:
    def test_progress_and_memorization(self):
        kg = toy_kg()
        hp = HyperParams(d=16, k=4, eta=0.5, lam=1e-4, batch_size=20, epochs=200, seed=0)
        store, rep = train_structure(builtin_structure("complex"), kg, hp)
        assert rep.final_train_loss < 2 * math.log(20)
        train_rep = evaluate(builtin_structure("complex"), store, kg.train, build_filter_index(kg))
        assert train_rep.mrr > 0.9

    def test_deterministic(self):
        kg = toy_kg(seed=1)
        hp = HyperParams(d=8, k=4, eta=0.3, lam=1e-3, batch_size=16, epochs=5, seed=4)
        s1, r1 = train_structure(builtin_structure("simple"), kg, hp)
        s2, r2 = train_structure(builtin_structure("simple"), kg, hp)
        assert r1 == r2
        assert np.array_equal(s1.entity, s2.entity)

    def test_store_init_not_mutated(self):
        kg = toy_kg(seed=2)
        hp = HyperParams(d=8, k=4, epochs=2, batch_size=16)
        init = toy_store(np.random.default_rng(0), n_e=20, n_r=1)
        before = init.entity.copy()
        train_structure(builtin_structure("complex"), kg, hp, store_init=init)
        assert np.array_equal(init.entity, before)

    def test_non_finite_loss(self):
        kg = toy_kg(seed=3)
        hp = HyperParams(d=8, k=4, epochs=1, batch_size=16)
        init = EmbeddingStore(np.full((20, 8), 1e200), np.full((1, 8), 1e200), 4)
        with np.errstate(all="ignore"):
            with pytest.raises(NumericError, match="epoch 0, batch 0"):
                train_structure(builtin_structure("distmult"), kg, hp, store_init=init)

    def test_curve_and_report_json(self, tmp_path):
        kg = toy_kg(seed=4)
        hp = HyperParams(d=8, k=4, epochs=4, batch_size=16)
        _, rep = train_structure(builtin_structure("complex"), kg, hp, eval_every=2)
        assert isinstance(rep, TrainReport) and rep.epochs_run == 4
        assert [row[2] != "" for row in rep.curve] == [False, True, False, True]
        rep.write_curve(tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "epoch,loss,val_mrr,seconds"
        assert rep.val_h1 <= rep.val_h10

    def test_equivalent_structures_train_identically(self):
        """Transforming structure and initial embeddings together commutes with AdaGrad."""
        kg = generate_synthetic_kg({"n_entities": 30, "relations": [{"type": "anti_symmetric", "n_triples": 80}]})
        hp = HyperParams(d=8, k=4, eta=0.2, lam=1e-3, batch_size=32, epochs=3, seed=1)
        rng = np.random.default_rng(5)
        a = builtin_structure("analogy")
        init = toy_store(rng, n_e=kg.n_entities, n_r=kg.n_relations, scale=0.1)
        c = 2
        perm, sigma, signs = [2, 0, 3, 1], [3, 1, 4, 2], [1, -1, -1, 1]

        ent_p = init.entity.reshape(-1, 4, c)[:, perm].reshape(init.entity.shape)
        rel_v = np.empty_like(init.relation.reshape(-1, 4, c))
        rel_v[:, np.array(sigma) - 1] = init.relation.reshape(-1, 4, c)
        rel_s = init.relation.reshape(-1, 4, c) * np.array(signs)[None, :, None]
        variants = [
            (permute_indices(a, perm), EmbeddingStore(ent_p, init.relation.copy(), 4)),
            (permute_values(a, sigma), EmbeddingStore(init.entity.copy(), rel_v.reshape(init.relation.shape), 4)),
            (flip_signs(a, signs), EmbeddingStore(init.entity.copy(), rel_s.reshape(init.relation.shape), 4)),
        ]
        _, base = train_structure(a, kg, hp, store_init=init, eval_every=1)
        for b, store in variants:
            _, rep = train_structure(b, kg, hp, store_init=store, eval_every=1)
            assert np.allclose([row[1] for row in rep.curve], [row[1] for row in base.curve], rtol=1e-8, atol=0)
            assert math.isclose(rep.val_mrr, base.val_mrr, rel_tol=1e-8)
