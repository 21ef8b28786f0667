"""Triple sampling and the preference, health and diversity objectives.

All losses are sums over their batch and are recorded on the caller's tape,
so the three objectives can share one forward pass and be differentiated
separately.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape, Tensor
from .errors import ContractError
from .graphdata import GraphBundle, SplitBundle
from .tagging import jaccard_matrix

MAX_TRIES = 100
JACCARD_FLOOR = 1e-8


class SamplingWarning(UserWarning):
    """Some users could not yield a valid sample and were skipped."""


@dataclass
class TripleBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    jaccard_i: np.ndarray | None = None
    jaccard_j: np.ndarray | None = None

    def __len__(self):
        return len(self.users)

    @classmethod
    def empty(cls, health=False):
        z = np.zeros(0, dtype=np.int64)
        j = np.zeros(0) if health else None
        return cls(z, z, z, j, j)


@dataclass
class DiversitySet:
    user: int
    foods: np.ndarray
    scores: np.ndarray


@dataclass
class LossValue:
    total: Tensor
    n: int

    @property
    def value(self) -> float:
        return float(self.total.data[0, 0])

    @property
    def mean(self) -> float:
        return self.value / self.n if self.n else 0.0


def train_positives(bundle: GraphBundle, split: SplitBundle | None) -> list[set]:
    idx = np.arange(len(bundle.interactions)) if split is None else split.train
    pos = [set() for _ in range(bundle.n_users)]
    for u, f in zip(bundle.edge_users[idx], bundle.edge_foods[idx]):
        pos[u].add(int(f))
    return pos


def _train_edges(bundle, split):
    idx = np.arange(len(bundle.interactions)) if split is None else np.asarray(split.train)
    return bundle.edge_users[idx], bundle.edge_foods[idx]


def _warn_skipped(what, skipped):
    if skipped:
        users = sorted(skipped)
        shown = ", ".join(map(str, users[:10])) + (" ..." if len(users) > 10 else "")
        warnings.warn(f"{what}: skipped {len(users)} user(s) after {MAX_TRIES} tries: {shown}",
                      SamplingWarning, stacklevel=3)


def _draw_negative(rng, n_foods, exclude, accept=None):
    for _ in range(MAX_TRIES):
        j = int(rng.integers(n_foods))
        if j not in exclude and (accept is None or accept(j)):
            return j
    return None


def sample_bpr_triples(bundle: GraphBundle, split: SplitBundle | None, batch_size: int,
                       rng: np.random.Generator, positives=None) -> TripleBatch:
    """Uniform train edge (u, i) plus a uniform food j outside u's train positives."""
    eu, ef = _train_edges(bundle, split)
    if batch_size <= 0:
        return TripleBatch.empty()
    if len(eu) == 0:
        raise ValueError("sample_bpr_triples: train split is empty")
    positives = positives or train_positives(bundle, split)
    users, pos, neg, skipped = [], [], [], set()
    for e in rng.integers(len(eu), size=batch_size):
        u = int(eu[e])
        j = _draw_negative(rng, bundle.n_foods, positives[u])
        if j is None:
            skipped.add(u)
            continue
        users.append(u)
        pos.append(int(ef[e]))
        neg.append(j)
    _warn_skipped("bpr sampling", skipped)
    return TripleBatch(np.array(users, dtype=np.int64), np.array(pos, dtype=np.int64),
                       np.array(neg, dtype=np.int64))


def sample_health_triples(bundle: GraphBundle, split: SplitBundle | None, batch_size: int,
                          rng: np.random.Generator, positives=None, jac=None) -> TripleBatch:
    """Like BPR sampling, but each (i, j) is ordered by Jaccard to the user's tags.

    Pairs with equal Jaccard are redrawn; after ``MAX_TRIES`` the user is skipped.
    After reordering ``i`` may be the non-interacted food.
    """
    eu, ef = _train_edges(bundle, split)
    if batch_size <= 0:
        return TripleBatch.empty(health=True)
    if len(eu) == 0:
        raise ValueError("sample_health_triples: train split is empty")
    positives = positives or train_positives(bundle, split)
    if jac is None:
        jac = jaccard_matrix(bundle.user_tags, bundle.food_tags)
    users, pos, neg, skipped = [], [], [], set()
    for e in rng.integers(len(eu), size=batch_size):
        u, i = int(eu[e]), int(ef[e])
        row = jac[u]
        j = _draw_negative(rng, bundle.n_foods, positives[u], lambda j: row[j] != row[i])
        if j is None:
            skipped.add(u)
            continue
        if row[j] > row[i]:
            i, j = j, i
        users.append(u)
        pos.append(i)
        neg.append(j)
    _warn_skipped("health sampling", skipped)
    users = np.array(users, dtype=np.int64)
    pos = np.array(pos, dtype=np.int64)
    neg = np.array(neg, dtype=np.int64)
    return TripleBatch(users, pos, neg, jac[users, pos] if len(users) else np.zeros(0),
                       jac[users, neg] if len(users) else np.zeros(0))


def score_differences(tape: Tape, E_users: Tensor, E_foods: Tensor, batch: TripleBatch) -> Tensor:
    """Column of y_ui - y_uj for each triple."""
    eu = tape.row_gather(E_users, index=batch.users)
    diff = tape.subtract(tape.row_gather(E_foods, index=batch.pos),
                         tape.row_gather(E_foods, index=batch.neg))
    return tape.reduce_sum(tape.hadamard(eu, diff), axis=1)


def l2_penalty(tape: Tape, store: ParamStore, names=None) -> Tensor:
    total = None
    for name in names or store.names:
        p = tape.param(store, name)
        term = tape.reduce_sum(tape.hadamard(p, p))
        total = term if total is None else tape.add(total, term)
    return total if total is not None else tape.constant(0.0)


def _neg_sum_logsig(tape, x):
    return tape.scalar_mul(tape.reduce_sum(tape.log_sigmoid(x)), c=-1.0)


def bpr_loss(tape: Tape, diffs: Tensor | None, lam: float = 0.0, store: ParamStore | None = None,
             n: int | None = None) -> LossValue:
    """-sum ln sigmoid(y_uij) + lam * ||Theta||^2."""
    n = n if n is not None else (0 if diffs is None else diffs.shape[0])
    total = _neg_sum_logsig(tape, diffs) if diffs is not None and diffs.shape[0] else tape.constant(0.0)
    if lam and store is not None:
        total = tape.add(total, tape.scalar_mul(l2_penalty(tape, store), c=lam))
    return LossValue(total, n)


def health_loss(tape: Tape, batch: TripleBatch, diffs: Tensor | None) -> LossValue:
    """-sum ln(max(dJ, 1e-8) * sigmoid(y_uij)); the dJ part is constant in the parameters."""
    if len(batch) == 0:
        return LossValue(tape.constant(0.0), 0)
    dj = np.asarray(batch.jaccard_i) - np.asarray(batch.jaccard_j)
    if (dj <= 0).any():
        bad = int(np.argmax(dj <= 0))
        raise ContractError(f"health_loss: triple {bad} has non-positive Jaccard gap {dj[bad]!r}")
    offset = -float(np.log(np.maximum(dj, JACCARD_FLOOR)).sum())
    return LossValue(tape.add(_neg_sum_logsig(tape, diffs), tape.constant(offset)), len(batch))


def select_diversity_set(scores: np.ndarray, user: int, pool_size: int = 100, set_size: int = 20,
                         rng: np.random.Generator | None = None, exclude=()) -> DiversitySet:
    """Top-``set_size`` of a uniform pool of ``pool_size`` foods, ranked by the current scores.

    ``scores`` is the user's score row; foods in ``exclude`` never enter the pool.
    Ties break towards the lower food index.
    """
    if not pool_size >= set_size >= 2:
        raise ValueError(f"need pool_size >= set_size >= 2, got {pool_size}, {set_size}")
    rng = rng or np.random.default_rng(0)
    scores = np.asarray(scores, dtype=np.float64)
    eligible = np.array([f for f in range(len(scores)) if f not in exclude], dtype=np.int64)
    if len(eligible) <= set_size:
        foods = eligible
    else:
        pool = np.sort(rng.choice(eligible, size=min(pool_size, len(eligible)), replace=False))
        order = np.lexsort((pool, -scores[pool]))
        foods = pool[order[:set_size]]
    return DiversitySet(int(user), foods, scores[foods].copy())


def select_diversity_sets(score_rows: np.ndarray, users, positives, pool_size=100, set_size=20,
                          rng=None) -> list[DiversitySet]:
    rng = rng or np.random.default_rng(0)
    out = []
    for u in users:
        s = select_diversity_set(score_rows[u], u, pool_size, set_size, rng, positives[u])
        if len(s.foods) >= 2:
            out.append(s)
    return out


def mean_pairwise_cosine(tape: Tape, E_foods: Tensor, sets: list[DiversitySet]) -> Tensor:
    """Column of c_bar per set, from sum-of-unit-vectors identities."""
    flat = np.concatenate([s.foods for s in sets])
    seg = np.repeat(np.arange(len(sets)), [len(s.foods) for s in sets])
    x_hat = tape.normalize_rows(tape.row_gather(E_foods, index=flat))
    total = tape.segment_sum(x_hat, dst=seg, src=np.arange(len(flat)), n_out=len(sets))
    sq_total = tape.reduce_sum(tape.hadamard(total, total), axis=1)
    sq_each = tape.segment_sum(tape.reduce_sum(tape.hadamard(x_hat, x_hat), axis=1),
                               dst=seg, src=np.arange(len(flat)), n_out=len(sets))
    m = np.array([len(s.foods) for s in sets], dtype=np.float64)
    return tape.hadamard(tape.subtract(sq_total, sq_each), tape.constant((1.0 / (m * (m - 1)))[:, None]))


def diversity_loss(tape: Tape, sets: list[DiversitySet], E_users: Tensor, E_foods: Tensor) -> LossValue:
    """sum over sets and their foods of -ln sigmoid((1 - c_bar_u) * y_ui)."""
    if not sets:
        return LossValue(tape.constant(0.0), 0)
    if any(len(s.foods) < 2 for s in sets):
        raise ContractError("diversity_loss: every set needs at least 2 foods")
    flat = np.concatenate([s.foods for s in sets])
    seg = np.repeat(np.arange(len(sets)), [len(s.foods) for s in sets])
    users = np.array([s.user for s in sets], dtype=np.int64)[seg]
    c_bar = mean_pairwise_cosine(tape, E_foods, sets)
    factor = tape.row_gather(tape.subtract(tape.constant(np.ones((len(sets), 1))), c_bar), index=seg)
    y = tape.reduce_sum(tape.hadamard(tape.row_gather(E_users, index=users),
                                      tape.row_gather(E_foods, index=flat)), axis=1)
    return LossValue(_neg_sum_logsig(tape, tape.hadamard(factor, y)), len(flat))
