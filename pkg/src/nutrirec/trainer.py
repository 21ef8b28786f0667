"""Training loop: structure learning, three objectives, MGDA, Adam."""

from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff
from .autodiff import ParamStore, Tape, adam_step, backward
from .errors import ConfigError, DivergenceError, NonFiniteError, ShapeError
from .graphdata import GraphBundle, SplitBundle, bundle_hash
from .objectives import (
    SamplingWarning,
    bpr_loss,
    diversity_loss,
    health_loss,
    sample_bpr_triples,
    sample_health_triples,
    score_differences,
    select_diversity_sets,
    train_positives,
)
from .pareto import GradientBundle, combine_gradients, min_norm_weights
from .structlearn import GraphContext, ModelConfig, forward, init_params
from .tagging import jaccard_matrix

OBJECTIVES = ("bpr", "health", "diversity")


@dataclass
class TrainConfig:
    dim: int = 128
    epochs: int = 500
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_period: int = 200
    l2: float = 1e-6
    batch_size: int | None = None
    eps_ft: float = 0.7
    eps_h: float = 0.7
    heads: int = 4
    layers: int = 2
    signed_layers: int = 2
    use_bpr: bool = True
    use_health: bool = True
    use_diversity: bool = True
    baseline: bool = False
    seed: int = 0
    pool_size: int = 100
    set_size: int = 20
    mgda_iters: int = 1000
    mgda_tol: float = 1e-9
    grad_normalization: str = "none"
    minibatch: bool = False
    n_batches: int = 1
    block_size: int = 4096

    def __post_init__(self):
        for name in ("dim", "epochs", "heads", "layers", "signed_layers", "lr_period", "n_batches",
                     "mgda_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0 or self.l2 < 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("need lr > 0, l2 >= 0 and 0 < lr_decay <= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1 when given")
        if not self.pool_size >= self.set_size >= 2:
            raise ConfigError("need pool_size >= set_size >= 2")
        if self.grad_normalization not in ("none", "l2"):
            raise ConfigError("grad_normalization must be 'none' or 'l2'")
        if not self.baseline and not self.objectives:
            raise ConfigError("at least one objective must be enabled")

    @property
    def objectives(self) -> tuple[str, ...]:
        if self.baseline:
            return ("bpr",)
        flags = (self.use_bpr, self.use_health, self.use_diversity)
        return tuple(o for o, on in zip(OBJECTIVES, flags) if on)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, heads=self.heads, eps_ft=self.eps_ft, eps_h=self.eps_h,
                           layers=self.layers, signed_layers=self.signed_layers,
                           block_size=self.block_size)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_period)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainHistory:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def losses(self, objective: str, per_triple: bool = True) -> np.ndarray:
        key = "mean" if per_triple else "sum"
        return np.array([e["losses"][objective][key] for e in self.entries])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def read(cls, path) -> "TrainHistory":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()])


@dataclass
class Checkpoint:
    store: ParamStore
    config: TrainConfig
    manifest: dict

    def check_compatible(self, ctx: GraphContext):
        expected = init_params(ctx, self.config.model, 0)
        for name in expected.names:
            if name not in self.store:
                raise ShapeError(f"checkpoint lacks parameter {name!r}")
            if self.store[name].shape != expected[name].shape:
                raise ShapeError(f"checkpoint parameter {name!r} has shape {self.store[name].shape}, "
                                 f"bundle needs {expected[name].shape}")


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    manifest = dict(ckpt.manifest, config=ckpt.config.to_dict(), config_hash=ckpt.config.hash())
    return autodiff.save_checkpoint(ckpt.store, path, manifest)


def load_checkpoint(path) -> Checkpoint:
    store, manifest = autodiff.load_checkpoint(path)
    config = TrainConfig.from_dict(manifest["config"])
    return Checkpoint(store, config, manifest)


def _epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


class _Objectives:
    """Per-epoch sampling state shared by the loss builders."""

    def __init__(self, bundle, split, cfg: TrainConfig):
        self.bundle, self.split, self.cfg = bundle, split, cfg
        self.positives = train_positives(bundle, split)
        self.active_users = [u for u, p in enumerate(self.positives) if p]
        self.jac = jaccard_matrix(bundle.user_tags, bundle.food_tags) if "health" in cfg.objectives else None
        self.n_train = len(split.train)

    def sample(self, rng, E_users, E_foods):
        cfg = self.cfg
        n = cfg.batch_size or self.n_train
        out = {}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SamplingWarning)
            if "bpr" in cfg.objectives:
                out["bpr"] = sample_bpr_triples(self.bundle, self.split, n, rng, self.positives)
            if "health" in cfg.objectives:
                out["health"] = sample_health_triples(self.bundle, self.split, n, rng, self.positives, self.jac)
            if "diversity" in cfg.objectives:
                scores = E_users @ E_foods.T
                out["diversity"] = select_diversity_sets(scores, self.active_users, self.positives,
                                                         cfg.pool_size, cfg.set_size, rng)
        skipped = sum(1 for w in caught if issubclass(w.category, SamplingWarning))
        return out, skipped


def _chunk(batch, n_batches, b):
    if isinstance(batch, list):
        return batch[b::n_batches]
    sl = slice(b, None, n_batches)
    return type(batch)(batch.users[sl], batch.pos[sl], batch.neg[sl],
                       None if batch.jaccard_i is None else batch.jaccard_i[sl],
                       None if batch.jaccard_j is None else batch.jaccard_j[sl])


def _build_losses(tape, fw, samples, store, cfg):
    losses = {}
    for obj in cfg.objectives:
        try:
            if obj == "bpr":
                b = samples["bpr"]
                d = score_differences(tape, fw.users, fw.foods, b) if len(b) else None
                losses[obj] = bpr_loss(tape, d, cfg.l2, store, len(b))
            elif obj == "health":
                b = samples["health"]
                d = score_differences(tape, fw.users, fw.foods, b) if len(b) else None
                losses[obj] = health_loss(tape, b, d)
            else:
                losses[obj] = diversity_loss(tape, samples["diversity"], fw.users, fw.foods)
        except NonFiniteError as exc:
            raise DivergenceError(f"objective {obj!r}: {exc}") from exc
    return losses


def train_step(store, ctx, cfg: TrainConfig, samples, lr, masks=None):
    """Forward once, one backward per objective, MGDA, one Adam step."""
    tape = Tape()
    fw = forward(tape, store, ctx, cfg.model, baseline=cfg.baseline, masks=masks)
    losses = _build_losses(tape, fw, samples, store, cfg)
    grads = {obj: backward(tape, lv.total, store) for obj, lv in losses.items()}
    gb = GradientBundle.from_maps(grads)
    if cfg.grad_normalization == "l2" and gb.K > 1:
        norms = np.linalg.norm(gb.vectors, axis=1, keepdims=True)
        gb = GradientBundle(gb.vectors / np.where(norms > 0, norms, 1.0), gb.labels, gb.names, gb.shapes)
    if gb.K == 1:
        weights = min_norm_weights(gb)
        combined = grads[gb.labels[0]]
    else:
        weights = min_norm_weights(gb, cfg.mgda_iters, cfg.mgda_tol)
        combined = combine_gradients(gb, weights.alpha)
    adam_step(store, combined, lr=lr, l2=0.0)
    return losses, weights, fw


def train(bundle: GraphBundle, split: SplitBundle, config: TrainConfig | None = None,
          history_path=None, init: ParamStore | None = None) -> tuple[Checkpoint, TrainHistory]:
    cfg = config or TrainConfig()
    if len(split.train) == 0:
        raise ValueError("train split is empty")
    ctx = GraphContext.from_bundle(bundle, split.train)
    store = init.copy() if init is not None else init_params(ctx, cfg.model, cfg.seed)
    objectives = _Objectives(bundle, split, cfg)
    history = TrainHistory()
    fh = open(history_path, "w") if history_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            rng = _epoch_rng(cfg.seed, epoch)
            lr = cfg.lr_at(epoch)
            try:
                snap = forward(Tape(), store, ctx, cfg.model, baseline=cfg.baseline)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}, forward pass: {exc}") from exc
            samples, skipped = objectives.sample(rng, snap.users.data, snap.foods.data)
            parts = cfg.n_batches if cfg.minibatch else 1
            sums = {o: 0.0 for o in cfg.objectives}
            counts = {o: 0 for o in cfg.objectives}
            steps = []
            for b in range(parts):
                chunk = samples if parts == 1 else {k: _chunk(v, parts, b) for k, v in samples.items()}
                try:
                    losses, weights, fw = train_step(store, ctx, cfg, chunk, lr, snap.masks)
                except DivergenceError as exc:
                    raise DivergenceError(f"epoch {epoch}, {exc}") from exc
                for o, lv in losses.items():
                    if not np.isfinite(lv.value):
                        raise DivergenceError(f"epoch {epoch}, objective {o!r}: non-finite loss")
                    sums[o] += lv.value
                    counts[o] += lv.n
                steps.append(weights)
            entry = {
                "epoch": epoch,
                "lr": lr,
                "losses": {o: {"sum": sums[o], "mean": sums[o] / counts[o] if counts[o] else 0.0,
                               "n": counts[o]} for o in cfg.objectives},
                "objectives": list(cfg.objectives),
                "alpha": steps[-1].alpha.tolist(),
                "grad_norm": steps[-1].norm,
                "mgda_gap": steps[-1].gap,
                "mgda_iterations": steps[-1].iterations,
                "channel_weights": fw.channel_weights.tolist(),
                "skipped_users": skipped,
                "wall_time": time.perf_counter() - t0,
            }
            if parts > 1:
                entry["step_alphas"] = [w.alpha.tolist() for w in steps]
            history.entries.append(entry)
            if fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    manifest = {
        "seed": cfg.seed,
        "split_seed": split.seed,
        "step": store.adam.step,
        "epochs": cfg.epochs,
        "bundle_hash": bundle_hash(bundle),
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
    }
    return Checkpoint(store, cfg, manifest), history
