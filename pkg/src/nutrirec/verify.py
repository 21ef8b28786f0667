"""Self-contained oracle suites, usable from tests and the ``verify`` command.

Each suite compares the production code against an independent, deliberately
naive reference (grid search, finite differences, brute-force loops).
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, finite_diff_check
from .evaluation import (
    Slate,
    avg_tags_at_k,
    h_score_at_k,
    ndcg_at_k,
    pct_foods_at_k,
    recall_at_k,
)
from .graphdata import SynthSpec, generate_synthetic, split_interactions
from .objectives import (
    bpr_loss,
    diversity_loss,
    health_loss,
    sample_bpr_triples,
    sample_health_triples,
    score_differences,
    select_diversity_sets,
    train_positives,
)
from .pareto import GradientBundle, certificate_violation, min_norm_weights, simplex_grid_oracle
from .structlearn import GraphContext, ModelConfig, forward, init_params
from .tagging import load_config


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name, fn):
    t0 = time.perf_counter()
    passed, detail = fn()
    return SuiteResult(name, bool(passed), detail, time.perf_counter() - t0)


# -- MGDA vs grid ----------------------------------------------------------------

def mgda_oracle_check(n_instances: int = 200, K: int = 3, P: int = 10, resolution: float = 0.005,
                      seed: int = 0) -> dict:
    worst_ratio, worst_cert = 0.0, -np.inf
    failures = 0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        bundle = GradientBundle(rng.normal(size=(K, P)), tuple(f"g{k}" for k in range(K)))
        w = min_norm_weights(bundle)
        _, oracle = simplex_grid_oracle(bundle, resolution)
        tol = max(1e-3, resolution * float(np.linalg.norm(bundle.vectors, axis=1).max()))
        ratio = abs(w.norm - oracle) / tol
        cert = certificate_violation(bundle, w)
        worst_ratio = max(worst_ratio, ratio)
        worst_cert = max(worst_cert, cert)
        failures += int(ratio > 1.0 or cert > 1e-6 or abs(w.alpha.sum() - 1) > 1e-12 or (w.alpha < 0).any())
    return {"failures": failures, "worst_norm_ratio": worst_ratio, "worst_certificate": worst_cert}


# -- gradient check on the toy instance --------------------------------------------

def toy_instance(seed: int = 0, n_users: int = 20, n_foods: int = 30):
    spec = SynthSpec(n_users=n_users, n_foods=n_foods, density=0.15, n_clusters=2,
                     tag_low_prob=0.3, tag_high_prob=0.3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bundle = generate_synthetic(spec, seed)
    split = split_interactions(bundle, (0.6, 0.2, 0.2), seed)
    return bundle, split


def gradient_check_losses(seed: int = 0, dim: int = 8, epsilon: float = 1e-4, n_samples: int = 12) -> dict:
    """Max relative error per objective over every learnable parameter.

    Threshold masks are frozen at the base point, so the checked function is
    the smooth piece the optimizer actually differentiates.
    """
    bundle, split = toy_instance(seed)
    ctx = GraphContext.from_bundle(bundle, split.train)
    cfg = ModelConfig(dim=dim, heads=2, eps_ft=0.0, eps_h=0.0, layers=2, signed_layers=2)
    store = init_params(ctx, cfg, seed)
    store["pool.logits"] = np.array([[0.3, -0.2, 0.1]])
    rng = np.random.default_rng(seed)
    positives = train_positives(bundle, split)
    base = forward(Tape(), store, ctx, cfg)
    masks = base.masks
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bpr = sample_bpr_triples(bundle, split, 40, rng, positives)
        health = sample_health_triples(bundle, split, 40, rng, positives)
    users = [u for u, p in enumerate(positives) if p]
    sets = select_diversity_sets(base.users.data @ base.foods.data.T, users, positives, 12, 5, rng)

    def make(kind):
        def loss_fn(st):
            tape = Tape()
            fw = forward(tape, st, ctx, cfg, masks=masks)
            if kind == "bpr":
                lv = bpr_loss(tape, score_differences(tape, fw.users, fw.foods, bpr), 1e-3, st)
            elif kind == "health":
                lv = health_loss(tape, health, score_differences(tape, fw.users, fw.foods, health))
            else:
                lv = diversity_loss(tape, sets, fw.users, fw.foods)
            return tape, tape.scalar_mul(lv.total, c=1.0 / max(lv.n, 1))
        return loss_fn

    out = {}
    for kind in ("bpr", "health", "diversity"):
        out[kind] = finite_diff_check(make(kind), store, epsilon, n_samples=n_samples,
                                      rng=np.random.default_rng([seed, len(kind)]))
    return out


# -- brute-force metric references -----------------------------------------------

def ref_recall(slate, truth):
    hit = 0
    for f in truth:
        if f in slate:
            hit += 1
    return hit / len(truth)


def ref_ndcg(slate, truth, k):
    dcg = 0.0
    for pos in range(min(k, len(slate))):
        if slate[pos] in truth:
            dcg += 1.0 / math.log2(pos + 2)
    ideal = 0.0
    for pos in range(min(k, len(truth))):
        ideal += 1.0 / math.log2(pos + 2)
    return dcg / ideal


def ref_h_score(slate, user_tags, food_tags):
    if not slate:
        return 0.0
    good = 0
    for f in slate:
        if any(user_tags[t] and food_tags[f][t] for t in range(len(user_tags))):
            good += 1
    return 100.0 * good / len(slate)


def ref_avg_tags(slate, food_tags):
    seen = set()
    for f in slate:
        for t, on in enumerate(food_tags[f]):
            if on:
                seen.add(t)
    return float(len(seen))


def ref_pct_foods(slates, n_catalog):
    seen = set()
    for s in slates:
        for f in s:
            seen.add(f)
    return 100.0 * len(seen) / n_catalog


def random_metric_instance(rng, k: int = 20):
    n_users = int(rng.integers(1, 15))
    n_foods = int(rng.integers(k, 3 * k + 10))
    n_tags = int(rng.integers(2, 12))
    user_tags = rng.random((n_users, n_tags)) < rng.uniform(0, 0.6)
    food_tags = rng.random((n_foods, n_tags)) < rng.uniform(0, 0.6)
    slates, truth = [], {}
    for u in range(n_users):
        length = int(rng.integers(0, k + 1))
        slates.append(Slate(u, [int(f) for f in rng.permutation(n_foods)[:length]]))
        n_pos = int(rng.integers(1, 8))
        truth[u] = {int(f) for f in rng.choice(n_foods, size=n_pos, replace=False)}
    return slates, truth, user_tags, food_tags, n_foods


def metric_oracle_check(n_instances: int = 100, k: int = 20, seed: int = 0) -> dict:
    worst = {m: 0.0 for m in ("recall", "ndcg", "h_score", "avg_tags", "pct_foods")}
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        slates, truth, ut, ft, n_foods = random_metric_instance(rng, k)
        ut_l, ft_l = ut.tolist(), ft.tolist()
        _, r = recall_at_k(slates, truth)
        _, n = ndcg_at_k(slates, truth, k)
        _, h = h_score_at_k(slates, ut, ft)
        _, a = avg_tags_at_k(slates, ft)
        p = pct_foods_at_k(slates, n_foods)
        for s, rv, nv, hv, av in zip(slates, r, n, h, a):
            worst["recall"] = max(worst["recall"], abs(rv - ref_recall(s.foods, truth[s.user])))
            worst["ndcg"] = max(worst["ndcg"], abs(nv - ref_ndcg(s.foods, truth[s.user], k)))
            worst["h_score"] = max(worst["h_score"], abs(hv - ref_h_score(s.foods, ut_l[s.user], ft_l)))
            worst["avg_tags"] = max(worst["avg_tags"], abs(av - ref_avg_tags(s.foods, ft_l)))
        worst["pct_foods"] = max(worst["pct_foods"], abs(p - ref_pct_foods([s.foods for s in slates], n_foods)))
    return worst


# -- tagging golden table ----------------------------------------------------------

GOLDEN_THRESHOLDS = {
    "calories": ("calories_kcal", 40, 225, 2000),
    "carbohydrates": ("carbohydrates_g", 55, 75, None),
    "protein": ("protein_g", 10, 15, 50),
    "saturated_fat": ("saturated_fat_g", 1.5, 5, 20),
    "cholesterol": ("cholesterol_mg", 20, 40, 300),
    "sugar": ("sugar_g", 5, 22.5, None),
    "dietary_fiber": ("dietary_fiber_g", 3, 6, None),
    "sodium": ("sodium_mg", 120, 200, 2000),
    "potassium": ("potassium_mg", 0, 525, 3500),
    "phosphorus": ("phosphorus_mg", 0, 105, 700),
    "iron": ("iron_mg", 0, 3.3, 22),
    "calcium": ("calcium_mg", 0, 150, 1000),
    "folic_acid": ("folic_acid_ug", 0, 60, 400),
    "vitamin_c": ("vitamin_c_mg", 0, 15, 100),
    "vitamin_d": ("vitamin_d_ug", 0, 2.25, 15),
    "vitamin_b12": ("vitamin_b12_ug", 0, 0.36, 2.4),
}
MACRO = ("calories", "carbohydrates", "protein", "saturated_fat", "cholesterol", "sugar", "dietary_fiber")


def golden_table_check() -> list[str]:
    """Mismatches between the shipped threshold table and the reference rows."""
    problems = []
    table = load_config().thresholds
    if set(table.names) != set(GOLDEN_THRESHOLDS):
        problems.append(f"nutrient set differs: {sorted(set(table.names) ^ set(GOLDEN_THRESHOLDS))}")
    for name, (column, low, high, nrv) in GOLDEN_THRESHOLDS.items():
        if name not in table.names:
            continue
        n = table.nutrient(name)
        if (n.column, n.low, n.high, n.nrv) != (column, low, high, nrv):
            problems.append(f"{name}: got {(n.column, n.low, n.high, n.nrv)}")
    macro = load_config(mode="macro_only").thresholds
    if set(macro.names) != set(MACRO):
        problems.append(f"macro_only set: {macro.names}")
    return problems


# -- split fuzz ----------------------------------------------------------------------

def split_fuzz_check(n_cases: int = 1000, seed: int = 0, ratios=(0.4, 0.4, 0.2)) -> int:
    """Number of fuzzed cases violating partition or +-1 proportion contracts."""
    bad = 0
    rng = np.random.default_rng(seed)
    cache = {}
    for case in range(n_cases):
        n = int(rng.integers(0, 200))
        if n not in cache:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cache[n] = generate_synthetic(SynthSpec(n_users=20, n_foods=10, density=n / 200.0), n)
        bundle = cache[n]
        m = len(bundle.interactions)
        s = split_interactions(bundle, ratios, int(rng.integers(0, 2**31)))
        parts = [set(s.train.tolist()), set(s.valid.tolist()), set(s.test.tolist())]
        ok = (parts[0].isdisjoint(parts[1]) and parts[0].isdisjoint(parts[2]) and parts[1].isdisjoint(parts[2])
              and set().union(*parts) == set(range(m)))
        for part, r in zip(parts, ratios):
            ok &= abs(len(part) - r * m) <= 1.0
        bad += int(not ok)
    return bad


# -- runner ------------------------------------------------------------------------

def run_all(quick: bool = False) -> list[SuiteResult]:
    results = []

    def mgda():
        r = mgda_oracle_check(50 if quick else 200)
        return r["failures"] == 0, (f"failures={r['failures']} worst_norm_ratio={r['worst_norm_ratio']:.3g} "
                                    f"worst_certificate={r['worst_certificate']:.3g}")

    def grads():
        r = gradient_check_losses(n_samples=4 if quick else 12)
        return max(r.values()) < 1e-4, " ".join(f"{k}={v:.2e}" for k, v in r.items())

    def metrics():
        r = metric_oracle_check(100)
        return max(r.values()) <= 1e-12, " ".join(f"{k}={v:.1e}" for k, v in r.items())

    def golden():
        p = golden_table_check()
        return not p, "; ".join(p) or "16 rows match"

    def split():
        bad = split_fuzz_check(200 if quick else 1000)
        return bad == 0, f"violations={bad}"

    for name, fn in (("mgda_grid_oracle", mgda), ("finite_differences", grads), ("metric_oracles", metrics),
                     ("threshold_table", golden), ("split_contract", split)):
        results.append(_timed(name, fn))
    return results
