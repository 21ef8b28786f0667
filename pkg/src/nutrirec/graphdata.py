"""Dataset model: users, foods, signed interactions, splits and adjacency."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import sys
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ReferentialError, SchemaError, ValidationError
from .tagging import (
    HealthConfig,
    TagConflictWarning,
    dump_config,
    load_config,
    parse_config,
    sign_matrix,
    tag_food_matrix,
    tag_user,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COND_PREFIX = "cond_"
FEAT_PREFIX = "feat_"

_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f", ""}


@dataclass(frozen=True, eq=False)
class UserRecord:
    user_id: str
    demographic_raw: np.ndarray
    demographic_features: np.ndarray
    condition_flags: dict
    tags: np.ndarray


@dataclass(frozen=True, eq=False)
class FoodRecord:
    food_id: str
    nutrients: np.ndarray
    descriptive_features: np.ndarray
    tags: np.ndarray


@dataclass(frozen=True)
class SignedInteraction:
    user_id: str
    food_id: str
    sign: int


@dataclass(frozen=True, eq=False)
class GraphBundle:
    users: tuple[UserRecord, ...]
    foods: tuple[FoodRecord, ...]
    interactions: tuple[SignedInteraction, ...]
    config: HealthConfig
    user_feature_names: tuple[str, ...] = ()
    food_feature_names: tuple[str, ...] = ()
    explicit_flag_names: tuple[str, ...] = ()

    @property
    def benchmark_mode(self) -> str:
        return self.config.thresholds.mode

    @property
    def thresholds(self):
        return self.config.thresholds

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_foods(self) -> int:
        return len(self.foods)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_foods

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {u.user_id: i for i, u in enumerate(self.users)}

    @cached_property
    def food_index(self) -> dict[str, int]:
        return {f.food_id: i for i, f in enumerate(self.foods)}

    @cached_property
    def edge_users(self) -> np.ndarray:
        return np.array([self.user_index[e.user_id] for e in self.interactions], dtype=np.int64)

    @cached_property
    def edge_foods(self) -> np.ndarray:
        return np.array([self.food_index[e.food_id] for e in self.interactions], dtype=np.int64)

    @cached_property
    def edge_signs(self) -> np.ndarray:
        return np.array([e.sign for e in self.interactions], dtype=np.int64)

    @cached_property
    def user_tags(self) -> np.ndarray:
        width = 2 * len(self.thresholds)
        if not self.users:
            return np.zeros((0, width), dtype=bool)
        return np.stack([u.tags for u in self.users])

    @cached_property
    def food_tags(self) -> np.ndarray:
        width = 2 * len(self.thresholds)
        if not self.foods:
            return np.zeros((0, width), dtype=bool)
        return np.stack([f.tags for f in self.foods])

    @cached_property
    def user_features(self) -> np.ndarray:
        return np.array([u.demographic_features for u in self.users], dtype=np.float64).reshape(
            self.n_users, len(self.user_feature_names))

    @cached_property
    def food_nutrients(self) -> np.ndarray:
        return np.array([f.nutrients for f in self.foods], dtype=np.float64).reshape(
            self.n_foods, len(self.thresholds))

    @cached_property
    def food_descriptive(self) -> np.ndarray:
        return np.array([f.descriptive_features for f in self.foods], dtype=np.float64).reshape(
            self.n_foods, len(self.food_feature_names))

    def food_model_features(self) -> np.ndarray:
        """Food input features for structure learning: z-scored log nutrients plus feat_*."""
        return np.hstack([_zscore(np.log1p(self.food_nutrients)), self.food_descriptive])


@dataclass(frozen=True, eq=False)
class SplitBundle:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int
    ratios: tuple[float, float, float] = (0.4, 0.4, 0.2)
    cold_users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _zscore(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return np.divide(x - mu, sd, out=np.zeros_like(x), where=sd > 0)


def _parse_float(text, what):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ValidationError(f"{what}: {text!r} is not a number") from None


def _parse_bool(text, what):
    t = str(text).strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValidationError(f"{what}: {text!r} is not a boolean")


def build_bundle(
    users: Sequence[tuple[str, dict, dict]],
    foods: Sequence[tuple[str, dict, dict]],
    pairs: Iterable[tuple[str, str]],
    config: HealthConfig,
    user_feature_names: Sequence[str] | None = None,
    food_feature_names: Sequence[str] | None = None,
) -> GraphBundle:
    """Assemble a bundle from raw rows.

    ``users``: ``(user_id, {demographic column: raw value}, {flag: bool})``.
    ``foods``: ``(food_id, {nutrient column: value}, {feat column: value})``.
    ``pairs``: ``(user_id, food_id)``; duplicates collapse to one edge.
    """
    table = config.thresholds
    rules = config.rules
    users = sorted(users, key=lambda r: r[0])
    foods = sorted(foods, key=lambda r: r[0])
    for kind, rows in (("user_id", users), ("food_id", foods)):
        ids = [r[0] for r in rows]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValidationError(f"duplicate {kind} {dup!r}")

    ufeat = tuple(user_feature_names if user_feature_names is not None
                  else (sorted(users[0][1]) if users else ()))
    ffeat = tuple(food_feature_names if food_feature_names is not None
                  else (sorted(foods[0][2]) if foods else ()))
    explicit = tuple(rules.explicit_flags)

    raw = np.array([[float(r[1][c]) for c in ufeat] for r in users], dtype=np.float64).reshape(
        len(users), len(ufeat))
    z = _zscore(raw)
    user_records = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TagConflictWarning)
        for i, (uid, demo, flags) in enumerate(users):
            flags = dict(flags)
            for lab in rules.lab_flags:
                if lab.column in demo and lab.name not in flags:
                    flags[lab.name] = lab.evaluate(float(demo[lab.column]))
            tags = tag_user(flags, rules, table, user_id=uid)
            user_records.append(UserRecord(uid, raw[i].copy(), z[i].copy(), flags, tags))
    conflicts = [w for w in caught if issubclass(w.category, TagConflictWarning)]
    for w in caught:
        if w not in conflicts:
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    if conflicts:
        first = "; ".join(str(w.message) for w in conflicts[:3])
        more = f" (+{len(conflicts) - 3} more)" if len(conflicts) > 3 else ""
        warnings.warn(f"{len(conflicts)} users with conflicting tag rules: {first}{more}",
                      TagConflictWarning, stacklevel=2)

    nutr = np.array([[float(r[1][c]) for c in table.columns] for r in foods], dtype=np.float64).reshape(
        len(foods), len(table))
    bad = np.argwhere(nutr < 0)
    if bad.size:
        i, j = bad[0]
        raise ValidationError(
            f"food {foods[i][0]!r}: negative value {nutr[i, j]} for {table.columns[j]}")
    ftags = tag_food_matrix(nutr, table)
    food_records = [
        FoodRecord(fid, nutr[i].copy(),
                   np.array([float(feat[c]) for c in ffeat], dtype=np.float64), ftags[i])
        for i, (fid, _, feat) in enumerate(foods)
    ]

    uidx = {r.user_id: i for i, r in enumerate(user_records)}
    fidx = {r.food_id: i for i, r in enumerate(food_records)}
    seen = set()
    for row, (uid, fid) in enumerate(pairs):
        if uid not in uidx:
            raise ReferentialError(f"interaction row {row + 1}: unknown user_id {uid!r}")
        if fid not in fidx:
            raise ReferentialError(f"interaction row {row + 1}: unknown food_id {fid!r}")
        seen.add((uid, fid))
    edges = sorted(seen)
    utags = np.stack([u.tags for u in user_records]) if user_records else None
    signs = sign_matrix(utags, ftags) if edges else None
    interactions = tuple(
        SignedInteraction(uid, fid, int(signs[uidx[uid], fidx[fid]])) for uid, fid in edges
    )
    return GraphBundle(tuple(user_records), tuple(food_records), interactions, config,
                       ufeat, ffeat, explicit)


def _read_csv(path, what) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        rows = list(reader)
    if not header:
        raise SchemaError(f"{what} file {path} has no header row")
    return header, rows


def _require(header, column, what):
    if column not in header:
        raise SchemaError(f"{what} file is missing column {column!r}")


def ingest_tabular(users_path, foods_path, interactions_path, threshold_config_path=None,
                   mode: str | None = None) -> GraphBundle:
    """Read the three CSV files plus a threshold/rule TOML into a bundle."""
    config = load_config(threshold_config_path, mode)
    table, rules = config.thresholds, config.rules

    uheader, urows = _read_csv(users_path, "users")
    _require(uheader, "user_id", "users")
    cond_cols = [c for c in uheader if c.startswith(COND_PREFIX)]
    demo_cols = [c for c in uheader if c != "user_id" and not c.startswith(COND_PREFIX)]
    available = {c[len(COND_PREFIX):] for c in cond_cols}
    for lab in rules.lab_flags:
        if lab.column in demo_cols:
            available.add(lab.name)
    for flag in rules.flags:
        if flag not in available:
            raise ConfigError(
                f"user rule references unknown flag {flag!r} (no {COND_PREFIX}{flag} column "
                f"and no lab column for it)")
    users = []
    for n, row in enumerate(urows, start=2):
        demo = {c: _parse_float(row[c], f"users line {n}, column {c}") for c in demo_cols}
        flags = {c[len(COND_PREFIX):]: _parse_bool(row[c], f"users line {n}, column {c}")
                 for c in cond_cols}
        users.append((row["user_id"].strip(), demo, flags))

    fheader, frows = _read_csv(foods_path, "foods")
    _require(fheader, "food_id", "foods")
    for col in table.columns:
        _require(fheader, col, "foods")
    feat_cols = [c for c in fheader if c.startswith(FEAT_PREFIX)]
    foods = []
    for n, row in enumerate(frows, start=2):
        nutr = {c: _parse_float(row[c], f"foods line {n}, column {c}") for c in table.columns}
        for c, v in nutr.items():
            if v < 0:
                raise ValidationError(f"foods line {n}: negative nutrient {c} = {v}")
        feats = {c: _parse_float(row[c], f"foods line {n}, column {c}") for c in feat_cols}
        foods.append((row["food_id"].strip(), nutr, feats))

    iheader, irows = _read_csv(interactions_path, "interactions")
    _require(iheader, "user_id", "interactions")
    _require(iheader, "food_id", "interactions")
    pairs = [(r["user_id"].strip(), r["food_id"].strip()) for r in irows]
    return build_bundle(users, foods, pairs, config, demo_cols, feat_cols)


def _fmt(x: float) -> str:
    return repr(float(x))


def tabular_text(bundle: GraphBundle) -> dict[str, str]:
    """CSV/TOML text of a bundle, as ``{"users.csv": ..., ...}``."""
    out = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    flags = list(bundle.explicit_flag_names)
    w.writerow(["user_id", *bundle.user_feature_names, *[COND_PREFIX + f for f in flags]])
    for u in bundle.users:
        w.writerow([u.user_id, *map(_fmt, u.demographic_raw),
                    *[int(bool(u.condition_flags.get(f, False))) for f in flags]])
    out["users.csv"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["food_id", *bundle.thresholds.columns, *bundle.food_feature_names])
    for f in bundle.foods:
        w.writerow([f.food_id, *map(_fmt, f.nutrients), *map(_fmt, f.descriptive_features)])
    out["foods.csv"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["user_id", "food_id"])
    for e in bundle.interactions:
        w.writerow([e.user_id, e.food_id])
    out["interactions.csv"] = buf.getvalue()
    out["thresholds.toml"] = dump_config(bundle.config)
    return out


def export_tabular(bundle: GraphBundle, directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in tabular_text(bundle).items():
        paths[name] = directory / name
        paths[name].write_text(text, encoding="utf-8")
    return paths


def bundle_hash(bundle: GraphBundle) -> str:
    h = hashlib.sha256()
    for name, text in sorted(tabular_text(bundle).items()):
        h.update(name.encode())
        h.update(text.encode())
    return h.hexdigest()


def save_bundle(bundle: GraphBundle, path) -> Path:
    """Single-file JSON bundle holding the tabular texts."""
    path = Path(path)
    doc = {"format": "nutrirec-bundle", "version": 1, "files": tabular_text(bundle)}
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    return path


def load_bundle(path) -> GraphBundle:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "nutrirec-bundle":
        raise SchemaError(f"{path}: not a bundle file")
    files = doc["files"]
    config = parse_config(tomllib.loads(files["thresholds.toml"]))

    def rows(text):
        reader = csv.DictReader(io.StringIO(text))
        return reader.fieldnames or [], list(reader)

    uh, ur = rows(files["users.csv"])
    cond = [c for c in uh if c.startswith(COND_PREFIX)]
    demo = [c for c in uh if c != "user_id" and c not in cond]
    users = [(r["user_id"], {c: float(r[c]) for c in demo},
              {c[len(COND_PREFIX):]: r[c] == "1" for c in cond}) for r in ur]
    fh, fr = rows(files["foods.csv"])
    feats = [c for c in fh if c.startswith(FEAT_PREFIX)]
    foods = [(r["food_id"], {c: float(r[c]) for c in config.thresholds.columns},
              {c: float(r[c]) for c in feats}) for r in fr]
    _, ir = rows(files["interactions.csv"])
    return build_bundle(users, foods, [(r["user_id"], r["food_id"]) for r in ir], config,
                        demo, feats)


def bundles_equal(a: GraphBundle, b: GraphBundle, atol: float = 0.0) -> bool:
    if a.thresholds != b.thresholds or a.interactions != b.interactions:
        return False
    if [u.user_id for u in a.users] != [u.user_id for u in b.users]:
        return False
    if [f.food_id for f in a.foods] != [f.food_id for f in b.foods]:
        return False
    return (
        np.array_equal(a.user_tags, b.user_tags)
        and np.array_equal(a.food_tags, b.food_tags)
        and np.allclose(a.food_nutrients, b.food_nutrients, atol=atol, rtol=0)
        and np.allclose(a.user_features, b.user_features, atol=max(atol, 1e-12), rtol=0)
        and np.allclose(a.food_descriptive, b.food_descriptive, atol=atol, rtol=0)
    )


# -- splitting and adjacency --------------------------------------------------

def split_interactions(bundle: GraphBundle, ratios=(0.4, 0.4, 0.2), seed: int = 0) -> SplitBundle:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValueError("ratios must have three entries (train, valid, test)")
    if any(r < 0 for r in ratios):
        raise ValueError(f"split ratios must be non-negative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = len(bundle.interactions)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(n, int(round(ratios[0] * n)))
    n_valid = min(n - n_train, int(round(ratios[1] * n)))
    train = np.sort(perm[:n_train])
    valid = np.sort(perm[n_train:n_train + n_valid])
    test = np.sort(perm[n_train + n_valid:])
    has_train = np.zeros(bundle.n_users, dtype=bool)
    has_train[bundle.edge_users[train]] = True
    return SplitBundle(train, valid, test, seed, ratios, np.flatnonzero(~has_train))


def build_adjacency(bundle: GraphBundle, edge_subset=None) -> sp.csr_matrix:
    """Symmetric (|U|+|F|)^2 0/1 adjacency; foods are offset by |U|."""
    idx = np.arange(len(bundle.interactions)) if edge_subset is None else np.asarray(edge_subset, dtype=np.int64)
    u = bundle.edge_users[idx]
    f = bundle.edge_foods[idx] + bundle.n_users
    rows = np.concatenate([u, f])
    cols = np.concatenate([f, u])
    n = bundle.n_nodes
    m = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    m.data[:] = 1.0
    return m


def bipartite_matrix(bundle: GraphBundle, edge_subset=None) -> np.ndarray:
    """Dense |U| x |F| 0/1 interaction block."""
    idx = np.arange(len(bundle.interactions)) if edge_subset is None else np.asarray(edge_subset, dtype=np.int64)
    out = np.zeros((bundle.n_users, bundle.n_foods))
    out[bundle.edge_users[idx], bundle.edge_foods[idx]] = 1.0
    return out


# -- synthetic benchmark ----------------------------------------------------------

_LAB_SPREAD = 0.15


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 500
    n_foods: int = 300
    density: float = 0.02
    n_clusters: int = 5
    flag_prevalence: float = 0.15
    tag_low_prob: float = 0.25
    tag_high_prob: float = 0.25
    cluster_affinity: float = 0.8
    health_affinity: float = 0.0
    popularity_exponent: float = 1.0
    n_demographic: int = 4
    n_food_features: int = 4
    mode: str = "all"


def _lab_column_values(labs, n, p, rng):
    """Raw values for one lab column; each flag fires with probability ``p``."""
    lows = [f.value for f in labs if f.op in ("<", "<=")]
    highs = [f.value for f in labs if f.op in (">", ">=")]
    lo = max(lows) if lows else None
    hi = min(highs) if highs else None
    if lo is None:
        lo = hi - abs(hi) * 0.5 - 1.0
    if hi is None:
        hi = lo + abs(lo) * 0.5 + 1.0
    width = hi - lo
    values = rng.uniform(lo + 0.1 * width, hi - 0.1 * width, size=n)
    for f in labs:
        fire = rng.random(n) < p
        margin = abs(f.value) * rng.uniform(0.02, _LAB_SPREAD, size=n) + 0.01
        shifted = f.value - margin if f.op in ("<", "<=") else f.value + margin
        values = np.where(fire, shifted, values)
    return values


def _nutrient_values(nutrient, n, p_low, p_high, rng):
    u = rng.random(n)
    low_v = rng.uniform(0.0, nutrient.low, size=n) if nutrient.low > 0 else np.zeros(n)
    high_v = nutrient.high * rng.uniform(1.0, 2.0, size=n)
    span = nutrient.high - nutrient.low
    mid_v = nutrient.low + span * rng.uniform(0.02, 0.98, size=n)
    return np.where(u < p_low, low_v, np.where(u < p_low + p_high, high_v, mid_v))


def _zipf(n, exponent, rng):
    w = 1.0 / np.arange(1, n + 1) ** exponent
    out = np.empty(n)
    out[rng.permutation(n)] = w
    return out / out.sum()


def generate_synthetic(spec: SynthSpec = SynthSpec(), seed: int = 0,
                       config: HealthConfig | None = None) -> GraphBundle:
    """Seeded stand-in benchmark with planted preference clusters.

    Each food has a home cluster; a user draws ``cluster_affinity`` of its
    interaction mass from its own cluster's foods (Zipf popularity inside the
    cluster), ``health_affinity`` from the globally popular foods that are
    signed healthy for it, and the rest from a global Zipf popularity.
    """
    nu, nf = int(spec.n_users), int(spec.n_foods)
    if nu < 0 or nf < 0 or spec.density < 0:
        raise ValidationError("synthetic spec: sizes and density must be non-negative")
    if not 0 <= spec.cluster_affinity + spec.health_affinity <= 1 or spec.health_affinity < 0:
        raise ValidationError("synthetic spec: affinities must be >= 0 and sum to at most 1")
    n_edges = int(round(spec.density * nu * nf))
    if n_edges > nu * nf:
        raise ValidationError(
            f"synthetic spec: density {spec.density} implies {n_edges} edges > {nu * nf} pairs")
    config = config or load_config(None, spec.mode)
    table, rules = config.thresholds, config.rules
    rng = np.random.default_rng(seed)
    C = max(1, int(spec.n_clusters))
    user_cluster, food_cluster = _draw_clusters(spec, rng)
    centers = rng.normal(0.0, 1.0, size=(C, max(spec.n_demographic, spec.n_food_features, 1)))

    demo_cols = [f"demo_{k}" for k in range(spec.n_demographic)] + ["age"]
    demo = np.hstack([
        centers[user_cluster, :spec.n_demographic] + rng.normal(0, 0.5, size=(nu, spec.n_demographic)),
        (30 + 8 * user_cluster + rng.normal(0, 6, size=nu))[:, None],
    ])
    lab_columns: dict[str, list] = {}
    for lab in rules.lab_flags:
        lab_columns.setdefault(lab.column, []).append(lab)
    lab_values = {c: _lab_column_values(labs, nu, spec.flag_prevalence, rng)
                  for c, labs in lab_columns.items()}
    explicit = rules.explicit_flags
    flag_draws = rng.random((nu, len(explicit))) < spec.flag_prevalence

    nutrients = np.column_stack([
        _nutrient_values(n, nf, spec.tag_low_prob, spec.tag_high_prob, rng) for n in table.nutrients
    ]) if len(table) else np.zeros((nf, 0))
    feat_cols = [f"feat_{k}" for k in range(spec.n_food_features)]
    feats = centers[food_cluster, :spec.n_food_features] + rng.normal(0, 0.5, size=(nf, spec.n_food_features))

    # degrees: one edge per user first, the rest by lognormal activity, capped at |F|
    degrees = np.zeros(nu, dtype=np.int64)
    if n_edges and nu:
        base = min(1, n_edges // nu)
        degrees[:] = base
        rest = n_edges - base * nu
        activity = rng.lognormal(0.0, 0.5, size=nu)
        degrees += rng.multinomial(rest, activity / activity.sum())
        while (degrees > nf).any():
            excess = int((degrees - nf).clip(min=0).sum())
            degrees = degrees.clip(max=nf)
            room = (degrees < nf).astype(np.float64)
            degrees += rng.multinomial(excess, room / room.sum())

    global_pop = _zipf(nf, spec.popularity_exponent, rng) if nf else np.zeros(0)
    cluster_pop = np.zeros((C, nf))
    for c in range(C):
        members = np.flatnonzero(food_cluster == c)
        if members.size:
            cluster_pop[c, members] = _zipf(members.size, spec.popularity_exponent, rng)
    pairs = []
    a = float(np.clip(spec.cluster_affinity, 0.0, 1.0))
    h = float(spec.health_affinity)
    healthy = _planted_signs(spec, demo, demo_cols, lab_values, explicit, flag_draws, nutrients, config) > 0 \
        if h > 0 and nu and nf else None
    for u in range(nu):
        if not degrees[u]:
            continue
        c = user_cluster[u]
        local = cluster_pop[c] if cluster_pop[c].sum() else global_pop
        liked = global_pop * healthy[u] if healthy is not None and healthy[u].any() else global_pop
        p = a * local + h * liked / liked.sum() + (1 - a - h) * global_pop
        if (p > 0).sum() < degrees[u]:
            p = 0.5 * p + 0.5 / nf
        chosen = rng.choice(nf, size=int(degrees[u]), replace=False, p=p / p.sum())
        pairs += [(u, int(f)) for f in chosen]

    width = max(len(str(max(nu, nf, 1) - 1)), 1)
    uid = [f"u{i:0{width}d}" for i in range(nu)]
    fid = [f"f{i:0{width}d}" for i in range(nf)]
    users = []
    for i in range(nu):
        raw = {c: float(demo[i, k]) for k, c in enumerate(demo_cols)}
        raw.update({c: float(v[i]) for c, v in lab_values.items()})
        flags = {f: bool(flag_draws[i, k]) for k, f in enumerate(explicit)}
        users.append((uid[i], raw, flags))
    foods = [(fid[j], {c: float(nutrients[j, k]) for k, c in enumerate(table.columns)},
              {c: float(feats[j, k]) for k, c in enumerate(feat_cols)}) for j in range(nf)]
    return build_bundle(users, foods, [(uid[u], fid[f]) for u, f in pairs], config,
                        demo_cols + list(lab_values), feat_cols)


def _planted_signs(spec, demo, demo_cols, lab_values, explicit, flag_draws, nutrients, config):
    """Edge signs for every (user, food) pair, quietly, before the bundle exists."""
    table, rules = config.thresholds, config.rules
    utags = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TagConflictWarning)
        for i in range(len(demo)):
            flags = {f: bool(flag_draws[i, k]) for k, f in enumerate(explicit)}
            for lab in rules.lab_flags:
                if lab.column in lab_values:
                    flags[lab.name] = lab.evaluate(float(lab_values[lab.column][i]))
            utags.append(tag_user(flags, rules, table))
    return sign_matrix(np.array(utags), tag_food_matrix(nutrients, table))


def _draw_clusters(spec: SynthSpec, rng):
    C = max(1, int(spec.n_clusters))
    user_cluster = rng.integers(0, C, size=int(spec.n_users))
    food_cluster = rng.permutation(np.arange(int(spec.n_foods)) % C)
    return user_cluster, food_cluster


def planted_clusters(spec: SynthSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(user cluster, food home cluster) planted by ``generate_synthetic(spec, seed)``."""
    return _draw_clusters(spec, np.random.default_rng(seed))
