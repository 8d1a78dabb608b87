"""Independent oracles used across the test suite.

Nothing here calls the package's own kernels; every oracle is built from
dense linear algebra or closed-form arithmetic so that agreement is a real
cross-check.
"""

import numpy as np

from blmsearch.kg import TripleStore, Vocab
from blmsearch.structure import StructureMatrix


def random_structure(rng, k=4, density=None):
    """Uniform entries in {-k..k}; ``density`` optionally forces extra zeros."""
    ent = rng.integers(-k, k + 1, size=(k, k))
    if density is not None:
        ent = ent * (rng.random((k, k)) < density)
    return StructureMatrix(ent)


def scalar_realization(entries, r):
    """k x k matrix ``sign(A_ij) * r[|A_ij|]`` with a float relation vector."""
    entries = np.asarray(entries)
    padded = np.concatenate(([0.0], np.asarray(r, dtype=float)))
    return np.sign(entries) * padded[np.abs(entries)]


def numeric_degenerate(entries, rng, draws=None, tol=1e-8):
    """Brute-force degeneracy: does some nonzero h, r or t zero out every score?

    The relation side fails iff some value 1..k never appears.  The entity
    sides fail iff the random realizations share a left (head) or right
    (tail) null vector, detected by the SVD rank of the stacked matrices.
    """
    entries = np.asarray(entries)
    k = entries.shape[0]
    if not set(range(1, k + 1)) <= set(np.abs(entries).ravel().tolist()):
        return True
    draws = draws or 3 * k
    mats = [scalar_realization(entries, rng.normal(size=k)) for _ in range(draws)]
    head = np.linalg.matrix_rank(np.hstack(mats), tol=tol)
    tail = np.linalg.matrix_rank(np.vstack(mats), tol=tol)
    return head < k or tail < k


def dense_operator(entries, r_vec):
    """Block matrix with ``sign(A_ij) diag(r_|A_ij|)`` blocks via Kronecker sums."""
    entries = np.asarray(entries)
    k = entries.shape[0]
    c = len(r_vec) // k
    chunks = np.asarray(r_vec, dtype=float).reshape(k, c)
    out = np.zeros((k * c, k * c))
    for i in range(k):
        for j in range(k):
            v = entries[i, j]
            if v:
                unit = np.zeros((k, k))
                unit[i, j] = np.sign(v)
                out += np.kron(unit, np.diag(chunks[abs(v) - 1]))
    return out


def dense_score(entries, h, r, t):
    return float(h @ dense_operator(entries, r) @ t)


# -- closed-form classical models (k = 4 chunk layouts) ----------------------


def _split(x):
    return np.split(np.asarray(x, dtype=float), 4)


def distmult_score(h, r, t):
    return float(np.sum(h * r * t))


def complex_score(h, r, t):
    h1, h2, h3, h4 = _split(h)
    r1, r2, r3, r4 = _split(r)
    t1, t2, t3, t4 = _split(t)
    hc = np.concatenate([h1, h2]) + 1j * np.concatenate([h3, h4])
    rc = np.concatenate([r1, r2]) + 1j * np.concatenate([r3, r4])
    tc = np.concatenate([t1, t2]) + 1j * np.concatenate([t3, t4])
    return float(np.real(np.sum(hc * rc * np.conj(tc))))


def simple_score(h, r, t):
    h1, h2, h3, h4 = _split(h)
    r1, r2, r3, r4 = _split(r)
    t1, t2, t3, t4 = _split(t)
    head_h, tail_h = np.concatenate([h1, h2]), np.concatenate([h3, h4])
    head_t, tail_t = np.concatenate([t1, t2]), np.concatenate([t3, t4])
    rel, rel_inv = np.concatenate([r1, r2]), np.concatenate([r3, r4])
    return float(np.sum(head_h * rel * tail_t) + np.sum(head_t * rel_inv * tail_h))


def analogy_score(h, r, t):
    h1, h2, h3, h4 = _split(h)
    r1, r2, r3, r4 = _split(r)
    t1, t2, t3, t4 = _split(t)
    real = np.sum(h1 * r1 * t1) + np.sum(h2 * r2 * t2)
    cplx = np.real(np.sum((h3 + 1j * h4) * (r3 + 1j * r4) * np.conj(t3 + 1j * t4)))
    return float(real + cplx)


def hamilton(p, q):
    """Elementwise Hamilton product of quaternion arrays shaped (4, n)."""
    a1, b1, c1, d1 = p
    a2, b2, c2, d2 = q
    return np.array(
        [
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        ]
    )


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quate_score(h, r, t):
    """Real part of ``h * conj(r) * conj(t)`` summed over coordinates."""
    hq, rq, tq = (np.asarray(x, dtype=float).reshape(4, -1) for x in (h, r, t))
    return float(np.sum(hamilton(hamilton(hq, quat_conj(rq)), quat_conj(tq))[0]))


CLOSED_FORMS = {
    "distmult": distmult_score,
    "complex": complex_score,
    "simple": simple_score,
    "analogy": analogy_score,
    "quate": quate_score,
}


# -- ranking ----------------------------------------------------------------


def brute_force_ranks(score_fn, n_entities, triples, known_triples):
    """Filtered head/tail ranks by explicit loops; ties count against the truth."""
    known = {tuple(t) for t in np.asarray(known_triples).tolist()}
    heads, tails = [], []
    for h, r, t in np.asarray(triples).tolist():
        s_true = score_fn(h, r, t)
        rank = 1
        for e in range(n_entities):
            if e != t and (h, r, e) not in known and score_fn(h, r, e) >= s_true:
                rank += 1
        tails.append(rank)
        rank = 1
        for e in range(n_entities):
            if e != h and (e, r, t) not in known and score_fn(e, r, t) >= s_true:
                rank += 1
        heads.append(rank)
    return np.array(heads), np.array(tails)


def make_store(train, valid=(), test=(), n_entities=None, n_relations=None):
    """TripleStore straight from integer triples (names are ``e<i>`` / ``r<i>``)."""
    arrs = [np.array(x, dtype=np.int64).reshape(-1, 3) for x in (train, valid, test)]
    allt = np.concatenate(arrs)
    n_e = n_entities or int(max(allt[:, 0].max(), allt[:, 2].max()) + 1)
    n_r = n_relations or int(allt[:, 1].max() + 1)
    return TripleStore(Vocab(f"e{i}" for i in range(n_e)), Vocab(f"r{i}" for i in range(n_r)), *arrs)


SYNTH_SPEC = {
    "n_entities": 200,
    "relations": [
        {"type": "symmetric", "n_triples": 1000},
        {"type": "anti_symmetric", "n_triples": 1000},
        {"type": "inverse-pair", "n_triples": 1000},
    ],
}


# one "PASS/FAIL name: detail" line per acceptance criterion, echoed in the
# pytest terminal summary by conftest.py
ACCEPTANCE_LINES = []
