"""Top-k slates and the five recommendation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphdata import GraphBundle, SplitBundle
from .structlearn import GraphContext, embeddings


@dataclass
class Slate:
    user: int
    foods: list


def rank_foods(scores: np.ndarray, exclude=(), k: int | None = None) -> list:
    """Food indices by descending score; ties go to the lower index (ids are sorted)."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    excl = set(exclude)
    out = [int(f) for f in order if int(f) not in excl]
    return out if k is None else out[:k]


def heldout_positives(bundle: GraphBundle, split: SplitBundle, split_name: str = "test") -> dict[int, set]:
    """user -> held-out positive foods of the ``test`` or ``valid`` part."""
    if split_name not in ("test", "valid"):
        raise ValueError(f"split_name must be 'test' or 'valid', got {split_name!r}")
    out: dict[int, set] = {}
    for e in getattr(split, split_name):
        out.setdefault(int(bundle.edge_users[e]), set()).add(int(bundle.edge_foods[e]))
    return out


def slates_from_scores(scores: np.ndarray, train_pos, users, k: int = 20) -> list[Slate]:
    return [Slate(int(u), rank_foods(scores[u], train_pos[u], k)) for u in users]


def build_slates(checkpoint, bundle: GraphBundle, split: SplitBundle, k: int = 20,
                 users=None) -> list[Slate]:
    """Top-k per user with a test positive; cold users (no train edge) are left out."""
    ctx = GraphContext.from_bundle(bundle, split.train)
    checkpoint.check_compatible(ctx)
    Eu, Ef = embeddings(checkpoint.store, ctx, checkpoint.config.model, checkpoint.config.baseline)
    if users is None:
        tp = heldout_positives(bundle, split)
        users = [u for u in sorted(tp) if ctx.train_pos[u]]
    return slates_from_scores(Eu @ Ef.T, ctx.train_pos, users, k)


def _per_user(slates, fn):
    vals = np.array([fn(s) for s in slates], dtype=np.float64)
    return float(vals.mean()) if len(vals) else 0.0, vals


def recall_at_k(slates, test_pos: dict) -> tuple[float, np.ndarray]:
    def one(s):
        truth = test_pos[s.user]
        return len(truth.intersection(s.foods)) / len(truth)
    return _per_user(slates, one)


def ndcg_at_k(slates, test_pos: dict, k: int | None = None) -> tuple[float, np.ndarray]:
    def one(s):
        truth = test_pos[s.user]
        kk = k if k is not None else len(s.foods)
        dcg = sum(1.0 / np.log2(r + 2) for r, f in enumerate(s.foods[:kk]) if f in truth)
        idcg = sum(1.0 / np.log2(r + 2) for r in range(min(len(truth), kk)))
        return dcg / idcg if idcg > 0 else 0.0
    return _per_user(slates, one)


def h_score_at_k(slates, user_tags: np.ndarray, food_tags: np.ndarray) -> tuple[float, np.ndarray]:
    """Percent of slate foods sharing at least one same-direction tag with the user."""
    user_tags = np.asarray(user_tags, dtype=bool)
    food_tags = np.asarray(food_tags, dtype=bool)

    def one(s):
        if not s.foods:
            return 0.0
        hits = (food_tags[s.foods] & user_tags[s.user]).any(axis=1)
        return 100.0 * hits.mean()
    return _per_user(slates, one)


def avg_tags_at_k(slates, food_tags: np.ndarray) -> tuple[float, np.ndarray]:
    food_tags = np.asarray(food_tags, dtype=bool)

    def one(s):
        return float(food_tags[s.foods].any(axis=0).sum()) if s.foods else 0.0
    return _per_user(slates, one)


def pct_foods_at_k(slates, n_catalog: int) -> float:
    if n_catalog <= 0:
        raise ValueError("catalog is empty")
    covered = set()
    for s in slates:
        covered.update(s.foods)
    return 100.0 * len(covered) / n_catalog


@dataclass
class MetricsReport:
    k: int
    split: str
    recall: float
    ndcg: float
    h_score: float
    avg_tags: float
    pct_foods: float
    n_users: int
    per_user: dict = field(default_factory=dict)

    KEYS = ("recall", "ndcg", "h_score", "avg_tags", "pct_foods")

    def means(self) -> dict:
        return {f"{key}@{self.k}": getattr(self, key) for key in self.KEYS}

    def to_record(self) -> dict:
        return {"k": self.k, "split": self.split, "n_users": self.n_users, **self.means(),
                "per_user": {key: [v.item() if hasattr(v, "item") else v for v in vals]
                             for key, vals in self.per_user.items()}}

    def to_text(self) -> str:
        lines = [f"split={self.split}", f"k={self.k}", f"n_users={self.n_users}"]
        lines += [f"{key}={value!r}" for key, value in self.means().items()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.to_text())
        js.write_text(self.to_json() + "\n")
        return txt, js


def evaluate_slates(slates, bundle: GraphBundle, split: SplitBundle, k: int = 20,
                    split_name: str = "test") -> MetricsReport:
    tp = heldout_positives(bundle, split, split_name)
    slates = [s for s in slates if s.user in tp]
    r, rv = recall_at_k(slates, tp)
    n, nv = ndcg_at_k(slates, tp, k)
    h, hv = h_score_at_k(slates, bundle.user_tags, bundle.food_tags)
    a, av = avg_tags_at_k(slates, bundle.food_tags)
    pct = pct_foods_at_k(slates, bundle.n_foods) if slates else 0.0
    return MetricsReport(k, split_name, r, n, h, a, pct, len(slates),
                         {"users": [s.user for s in slates], "recall": rv, "ndcg": nv,
                          "h_score": hv, "avg_tags": av})


def evaluate(checkpoint, bundle: GraphBundle, split: SplitBundle, k: int = 20,
             split_name: str = "test") -> MetricsReport:
    positives = heldout_positives(bundle, split, split_name)
    ctx_pos = GraphContext.from_bundle(bundle, split.train).train_pos
    users = [u for u in sorted(positives) if ctx_pos[u]]
    slates = build_slates(checkpoint, bundle, split, k, users)
    return evaluate_slates(slates, bundle, split, k, split_name)
