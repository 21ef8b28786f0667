"""Health-aware graph structure learning and normalised propagation.

The learned graphs live on the user x food block only. All three channels
(observed interactions, feature-similarity graph, healthy-edge graph) are
dense ``|U| x |F|`` tensors on the tape; thresholding multiplies by a fixed
0/1 mask, so gradients reach the retained similarity values and never the
keep/drop decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import ParamStore, Tape, Tensor
from .graphdata import GraphBundle, bipartite_matrix

CHANNELS = ("interaction", "feature", "health")


@dataclass
class ModelConfig:
    dim: int = 128
    heads: int = 4
    eps_ft: float = 0.7
    eps_h: float = 0.7
    layers: int = 2
    signed_layers: int = 2
    feature_graph: bool = True
    health_graph: bool = True
    block_size: int = 4096
    init_scale: float = 0.1

    def __post_init__(self):
        if self.heads < 1 or self.layers < 1 or self.signed_layers < 1 or self.dim < 1:
            raise ValueError("dim, heads, layers and signed_layers must be >= 1")
        for name in ("eps_ft", "eps_h"):
            if not -1.0 <= getattr(self, name) <= 1.01:
                raise ValueError(f"{name} must lie in [-1, 1]")


@dataclass
class GraphContext:
    """Constants of one training graph (bundle + train edges)."""

    n_users: int
    n_foods: int
    interactions: np.ndarray
    user_features: np.ndarray
    food_features: np.ndarray
    pos_edges: tuple[np.ndarray, np.ndarray]
    neg_edges: tuple[np.ndarray, np.ndarray]
    train_pos: list = field(default_factory=list)

    @property
    def n_nodes(self):
        return self.n_users + self.n_foods

    @classmethod
    def from_bundle(cls, bundle: GraphBundle, train_idx=None) -> "GraphContext":
        idx = np.arange(len(bundle.interactions)) if train_idx is None else np.asarray(train_idx, dtype=np.int64)
        u = bundle.edge_users[idx]
        f = bundle.edge_foods[idx] + bundle.n_users
        s = bundle.edge_signs[idx]

        def both_ways(mask):
            return np.concatenate([u[mask], f[mask]]), np.concatenate([f[mask], u[mask]])

        train_pos = [set() for _ in range(bundle.n_users)]
        for a, b in zip(u, bundle.edge_foods[idx]):
            train_pos[a].add(int(b))
        return cls(
            n_users=bundle.n_users,
            n_foods=bundle.n_foods,
            interactions=bipartite_matrix(bundle, idx),
            user_features=bundle.user_features,
            food_features=bundle.food_model_features(),
            pos_edges=both_ways(s > 0),
            neg_edges=both_ways(s < 0),
            train_pos=train_pos,
        )


def init_params(ctx: GraphContext, cfg: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    d, n = cfg.dim, ctx.n_nodes
    du, df = ctx.user_features.shape[1], ctx.food_features.shape[1]
    store = ParamStore()
    store.add("user_proj.W", rng.normal(0, 1 / np.sqrt(max(du, 1)), size=(du, d)))
    store.add("user_proj.b", np.zeros((1, d)))
    store.add("food_proj.W", rng.normal(0, 1 / np.sqrt(max(df, 1)), size=(df, d)))
    store.add("food_proj.b", np.zeros((1, d)))
    store.add("heads", rng.uniform(0.5, 1.5, size=(cfg.heads, d)))
    store.add("signed.h_pos0", rng.normal(0, cfg.init_scale, size=(n, d)))
    store.add("signed.h_neg0", rng.normal(0, cfg.init_scale, size=(n, d)))
    for layer in range(1, cfg.signed_layers + 1):
        width = 2 * d if layer == 1 else 3 * d
        for side in ("pos", "neg"):
            store.add(f"signed.W_{side}.{layer}", rng.normal(0, 1 / np.sqrt(width), size=(width, d)))
    store.add("pool.logits", np.zeros((1, len(CHANNELS))))
    store.add("embed.H0", rng.normal(0, cfg.init_scale, size=(n, d)))
    return store


# -- operations -----------------------------------------------------------------

def project_features(tape: Tape, features: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """tanh(f W + b), row-wise."""
    return tape.tanh(tape.add(tape.matmul(features, W), b))


def khead_cosine(tape: Tape, u_rows: Tensor, f_rows: Tensor, head_weights: Tensor,
                 block_size: int | None = None) -> Tensor:
    """Mean over heads of cos(w_k * u, w_k * f) for every (u, f) pair."""
    K = head_weights.shape[0]
    n = u_rows.shape[0]
    block = n if not block_size or block_size >= n else block_size
    sims = []
    for k in range(K):
        w = tape.row_gather(head_weights, index=[k])
        fk = tape.hadamard(f_rows, w)
        if block == n:
            sims.append(tape.cosine_rows(tape.hadamard(u_rows, w), fk))
            continue
        parts = []
        for start in range(0, n, block):
            rows = tape.row_gather(u_rows, index=np.arange(start, min(n, start + block)))
            parts.append(tape.cosine_rows(tape.hadamard(rows, w), fk))
        sims.append(tape.concat_rows(*parts))
    total = sims[0]
    for s in sims[1:]:
        total = tape.add(total, s)
    return tape.scalar_mul(total, c=1.0 / K)


def threshold_mask(similarity: np.ndarray, eps: float) -> np.ndarray:
    return (np.asarray(similarity) >= eps).astype(np.float64)


def threshold_block(tape: Tape, similarity: Tensor, eps: float, mask: np.ndarray | None = None) -> Tensor:
    """Keep similarity values >= eps; the mask itself is a constant."""
    if mask is None:
        mask = threshold_mask(similarity.data, eps)
    return tape.hadamard(similarity, tape.constant(mask))


def threshold_graph(similarity: np.ndarray, eps: float) -> sp.csr_matrix:
    """Symmetric (|U|+|F|)^2 sparse adjacency of the user-food pairs with similarity >= eps."""
    sim = np.asarray(similarity, dtype=np.float64)
    nu, nf = sim.shape
    block = sp.csr_matrix(sim * threshold_mask(sim, eps))
    block.eliminate_zeros()
    return sp.bmat([[sp.csr_matrix((nu, nu)), block], [block.T, sp.csr_matrix((nf, nf))]], format="csr")


def signed_conv(tape: Tape, store: ParamStore, ctx: GraphContext, layers: int) -> Tensor:
    """Balance-theory aggregation over the signed interaction graph.

    Returns z = [h_pos ; h_neg] of the last layer for every node.
    """
    n = ctx.n_nodes
    pos_dst, pos_src = ctx.pos_edges
    neg_dst, neg_src = ctx.neg_edges

    def mean_pos(x):
        return tape.segment_mean(x, dst=pos_dst, src=pos_src, n_out=n)

    def mean_neg(x):
        return tape.segment_mean(x, dst=neg_dst, src=neg_src, n_out=n)

    h_pos = tape.param(store, "signed.h_pos0")
    h_neg = tape.param(store, "signed.h_neg0")
    W_pos = tape.param(store, "signed.W_pos.1")
    W_neg = tape.param(store, "signed.W_neg.1")
    new_pos = tape.tanh(tape.matmul(tape.concat_cols(mean_pos(h_pos), h_pos), W_pos))
    new_neg = tape.tanh(tape.matmul(tape.concat_cols(mean_neg(h_neg), h_neg), W_neg))
    h_pos, h_neg = new_pos, new_neg
    for layer in range(2, layers + 1):
        W_pos = tape.param(store, f"signed.W_pos.{layer}")
        W_neg = tape.param(store, f"signed.W_neg.{layer}")
        # friends of friends + enemies of enemies -> positive; cross terms -> negative
        new_pos = tape.tanh(tape.matmul(
            tape.concat_cols(mean_pos(h_pos), mean_neg(h_neg), h_pos), W_pos))
        new_neg = tape.tanh(tape.matmul(
            tape.concat_cols(mean_pos(h_neg), mean_neg(h_pos), h_neg), W_neg))
        h_pos, h_neg = new_pos, new_neg
    return tape.concat_cols(h_pos, h_neg)


def health_similarity(tape: Tape, z: Tensor, n_users: int) -> Tensor:
    users = tape.row_gather(z, index=np.arange(n_users))
    foods = tape.row_gather(z, index=np.arange(n_users, z.shape[0]))
    return tape.cosine_rows(users, foods)


def build_health_graph(tape: Tape, z: Tensor, n_users: int, eps_h: float,
                       mask: np.ndarray | None = None) -> Tensor:
    return threshold_block(tape, health_similarity(tape, z, n_users), eps_h, mask)


def pool_structures(tape: Tape, A: Tensor, A_ft: Tensor, A_h: Tensor, logits: Tensor) -> Tensor:
    """Channel attention: softmax(logits)-weighted sum of the three blocks."""
    weights = tape.softmax_rows(logits)
    out = None
    for c, block in enumerate((A, A_ft, A_h)):
        term = tape.hadamard(block, tape.col_gather(weights, index=[c]))
        out = term if out is None else tape.add(out, term)
    return out


def propagate(tape: Tape, S: Tensor, H0_users: Tensor, H0_foods: Tensor, L: int) -> tuple[Tensor, Tensor]:
    """Layer-mean of symmetric-normalised propagation over the bipartite block ``S``.

    Isolated nodes get d^-1/2 = 0, so they keep only their layer-0 share.
    """
    deg_u = tape.reduce_sum(S, axis=1)
    deg_f = tape.reduce_sum(S, axis=0)
    N = tape.hadamard(tape.hadamard(tape.rsqrt_safe(deg_u), S), tape.rsqrt_safe(deg_f))
    Nt = tape.transpose(N)
    hu, hf = H0_users, H0_foods
    sum_u, sum_f = hu, hf
    for _ in range(L):
        hu, hf = tape.matmul(N, hf), tape.matmul(Nt, hu)
        sum_u, sum_f = tape.add(sum_u, hu), tape.add(sum_f, hf)
    scale = 1.0 / (L + 1)
    return tape.scalar_mul(sum_u, c=scale), tape.scalar_mul(sum_f, c=scale)


def score(E_users: np.ndarray, E_foods: np.ndarray, user_idx: int, food_idx: int) -> float:
    if not (0 <= user_idx < len(E_users)) or not (0 <= food_idx < len(E_foods)):
        raise IndexError(f"score: index ({user_idx}, {food_idx}) out of range")
    return float(E_users[user_idx] @ E_foods[food_idx])


def score_matrix(E_users: np.ndarray, E_foods: np.ndarray) -> np.ndarray:
    return E_users @ E_foods.T


# -- full forward pass ---------------------------------------------------------------

@dataclass
class Forward:
    users: Tensor
    foods: Tensor
    structure: Tensor
    masks: dict
    channel_weights: np.ndarray


def forward(tape: Tape, store: ParamStore, ctx: GraphContext, cfg: ModelConfig,
            baseline: bool = False, masks: dict | None = None) -> Forward:
    """Final user/food embeddings for the current parameters.

    ``masks`` reuses threshold masks from an earlier pass (graphs are rebuilt
    once per epoch); missing entries are computed from the current values.
    ``baseline`` skips structure learning and propagates over interactions only.
    """
    masks = dict(masks or {})
    nu, nf = ctx.n_users, ctx.n_foods
    A = tape.constant(ctx.interactions)
    if baseline:
        S = A
        weights = np.array([1.0, 0.0, 0.0])
    else:
        zeros = np.zeros((nu, nf))
        if cfg.feature_graph:
            fu = project_features(tape, tape.constant(ctx.user_features),
                                  tape.param(store, "user_proj.W"), tape.param(store, "user_proj.b"))
            ff = project_features(tape, tape.constant(ctx.food_features),
                                  tape.param(store, "food_proj.W"), tape.param(store, "food_proj.b"))
            sim = khead_cosine(tape, fu, ff, tape.param(store, "heads"), cfg.block_size)
            if "feature" not in masks:
                masks["feature"] = threshold_mask(sim.data, cfg.eps_ft)
            A_ft = threshold_block(tape, sim, cfg.eps_ft, masks["feature"])
        else:
            A_ft = tape.constant(zeros)
        if cfg.health_graph:
            z = signed_conv(tape, store, ctx, cfg.signed_layers)
            sim_h = health_similarity(tape, z, nu)
            if "health" not in masks:
                masks["health"] = threshold_mask(sim_h.data, cfg.eps_h)
            A_h = threshold_block(tape, sim_h, cfg.eps_h, masks["health"])
        else:
            A_h = tape.constant(zeros)
        logits = tape.param(store, "pool.logits")
        S = pool_structures(tape, A, A_ft, A_h, logits)
        w = np.exp(logits.data[0] - logits.data[0].max())
        weights = w / w.sum()
    H0 = tape.param(store, "embed.H0")
    hu0 = tape.row_gather(H0, index=np.arange(nu))
    hf0 = tape.row_gather(H0, index=np.arange(nu, nu + nf))
    Eu, Ef = propagate(tape, S, hu0, hf0, cfg.layers)
    return Forward(Eu, Ef, S, masks, weights)


def embeddings(store: ParamStore, ctx: GraphContext, cfg: ModelConfig, baseline: bool = False):
    """Final (user, food) embeddings as plain arrays."""
    fw = forward(Tape(), store, ctx, cfg, baseline)
    return fw.users.data, fw.foods.data
