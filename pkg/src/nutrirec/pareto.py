"""Minimum-norm convex combination of per-objective gradients (MGDA).

The solver runs Frank-Wolfe on the simplex using only the Gram matrix of the
gradients. Besides the classic toward-vertex step it can take away steps, which
remove weight from the worst active objective; without them the iterates
zig-zag and the duality gap decays too slowly to certify optimality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np

from .errors import NonFiniteError, ShapeError


@dataclass
class GradientBundle:
    vectors: np.ndarray
    labels: tuple[str, ...]
    names: tuple[str, ...] = ()
    shapes: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.shape[0] < 1:
            raise ShapeError("GradientBundle needs at least one gradient")
        if not self.labels:
            self.labels = tuple(f"g{k}" for k in range(self.vectors.shape[0]))
        if len(self.labels) != self.vectors.shape[0]:
            raise ShapeError("one label per gradient required")
        if not np.isfinite(self.vectors).all():
            bad = [self.labels[k] for k in range(len(self.labels)) if not np.isfinite(self.vectors[k]).all()]
            raise NonFiniteError(f"non-finite gradient for objective(s) {bad}")

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def from_maps(cls, maps: dict[str, dict[str, np.ndarray]]) -> "GradientBundle":
        """Flatten ``{objective: {param: grad}}`` in sorted parameter-name order."""
        labels = tuple(maps)
        names = tuple(sorted(set().union(*(m.keys() for m in maps.values()))))
        shapes = []
        for n in names:
            found = {tuple(np.shape(m[n])) for m in maps.values() if n in m}
            if len(found) != 1:
                raise ShapeError(f"parameter {n!r} has inconsistent gradient shapes {found}")
            shapes.append(found.pop())
        rows = []
        for lab in labels:
            m = maps[lab]
            parts = [np.ravel(m[n]) if n in m else np.zeros(int(np.prod(s))) for n, s in zip(names, shapes)]
            rows.append(np.concatenate(parts) if parts else np.zeros(0))
        return cls(np.array(rows), labels, names, tuple(shapes))

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        sizes = [int(np.prod(s)) for s in self.shapes]
        if sum(sizes) != vec.size:
            raise ShapeError(f"flat vector of {vec.size} entries does not match {sum(sizes)} parameters")
        out, start = {}, 0
        for n, s, k in zip(self.names, self.shapes, sizes):
            out[n] = vec[start:start + k].reshape(s).copy()
            start += k
        return out


@dataclass
class ParetoWeights:
    alpha: np.ndarray
    direction: np.ndarray
    iterations: int
    norm: float
    gap: float = 0.0
    trace: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "norm": self.norm, "iterations": self.iterations,
                "gap": self.gap}


def _project_simplex_rounding(alpha):
    alpha = np.maximum(alpha, 0.0)
    return alpha / alpha.sum()


def min_norm_weights(bundle: GradientBundle, max_iters: int = 1000, tol: float = 1e-9,
                     squared_denominator: bool = True, away_steps: bool = True,
                     record_trace: bool = False) -> ParetoWeights:
    """Simplex weights minimising ||sum_k alpha_k g_k||.

    Toward step: t = argmin_k <g_hat, g_k>, step
    eta = (<g_hat,g_hat> - <g_hat,g_t>) / ||g_hat - g_t||^2 clipped to [0, 1]
    (``squared_denominator=False`` uses the unsquared norm). With ``away_steps``
    the solver also considers moving away from the active vertex with the largest
    <g_hat, g_s>. Stops once the duality gap <g_hat,g_hat> - min_k <g_hat,g_k>
    is <= ``tol``, or when a step makes no progress.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    G_vec = bundle.vectors
    K = bundle.K
    if K == 1:
        g = G_vec[0].copy()
        return ParetoWeights(np.ones(1), g, 0, float(np.linalg.norm(g)))
    if np.all(G_vec == G_vec[0]):
        alpha = np.full(K, 1.0 / K)
        g = G_vec[0].copy()
        return ParetoWeights(alpha, g, 0, float(np.linalg.norm(g)))
    G = G_vec @ G_vec.T
    alpha = np.full(K, 1.0 / K)
    trace = []
    steps = 0
    for _ in range(max_iters):
        Ga = G @ alpha
        f = float(alpha @ Ga)
        t = int(np.argmin(Ga))
        gap = f - Ga[t]
        if record_trace:
            trace.append((alpha.copy(), float(np.sqrt(max(f, 0.0))), float(gap)))
        if gap <= tol:
            break
        active = np.flatnonzero(alpha > 0)
        s = int(active[np.argmax(Ga[active])])
        away_gap = Ga[s] - f
        if away_steps and away_gap > gap and alpha[s] < 1.0:
            denom = f - 2 * Ga[s] + G[s, s]
            gmax = alpha[s] / (1.0 - alpha[s])
            step = gmax if denom <= 0 else min(gmax, away_gap / denom)
            new = (1 + step) * alpha
            new[s] -= step
            if step == gmax:
                new[s] = 0.0
        else:
            denom = f - 2 * Ga[t] + G[t, t]
            if not squared_denominator:
                denom = np.sqrt(max(denom, 0.0))
            step = 1.0 if denom <= 0 else float(np.clip(gap / denom, 0.0, 1.0))
            new = (1 - step) * alpha
            new[t] += step
        if step <= tol:
            break
        new = _project_simplex_rounding(new)
        if float(new @ G @ new) > f:
            # numerical noise only; keep the better iterate
            break
        alpha = new
        steps += 1
    else:
        Ga = G @ alpha
        gap = float(alpha @ Ga - Ga.min())
    direction = alpha @ G_vec
    if record_trace:
        trace.append((alpha.copy(), float(np.linalg.norm(direction)), float(max(gap, 0.0))))
    return ParetoWeights(alpha, direction, steps, float(np.linalg.norm(direction)), float(max(gap, 0.0)), trace)


def simplex_grid(K: int, resolution: float) -> np.ndarray:
    """All simplex points whose coordinates are multiples of ``resolution``."""
    n = int(round(1.0 / resolution))
    if n < 1 or abs(n * resolution - 1.0) > 1e-9:
        raise ValueError(f"resolution must divide 1, got {resolution}")
    return _grid(K, n)


@lru_cache(maxsize=8)
def _grid(K: int, n: int) -> np.ndarray:
    if K == 1:
        return np.ones((1, 1))
    # stars and bars: choose K-1 bar positions among n+K-1 slots
    pts = []
    for bars in combinations(range(n + K - 1), K - 1):
        edges = (-1,) + bars + (n + K - 1,)
        pts.append([edges[i + 1] - edges[i] - 1 for i in range(K)])
    grid = np.array(pts, dtype=np.float64) / n
    grid.setflags(write=False)
    return grid


def simplex_grid_oracle(bundle: GradientBundle, resolution: float = 0.005) -> tuple[np.ndarray, float]:
    """Exhaustive search over the regular simplex grid; K <= 4 only."""
    if bundle.K > 4:
        raise ValueError(f"simplex_grid_oracle supports K <= 4, got {bundle.K}")
    grid = simplex_grid(bundle.K, resolution)
    G = bundle.vectors @ bundle.vectors.T
    sq = np.einsum("ij,jk,ik->i", grid, G, grid)
    best = int(np.argmin(sq))
    alpha = grid[best]
    return alpha, float(np.linalg.norm(alpha @ bundle.vectors))


def combine_gradients(bundle: GradientBundle, alpha) -> dict[str, np.ndarray]:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (bundle.K,):
        raise ShapeError(f"alpha has shape {alpha.shape}, expected ({bundle.K},)")
    if (alpha < 0).any() or abs(alpha.sum() - 1.0) > 1e-9:
        raise ValueError("alpha must lie on the simplex")
    return bundle.unflatten(alpha @ bundle.vectors)


def certificate_violation(bundle: GradientBundle, weights: ParetoWeights) -> float:
    """max_k (||g_hat||^2 - g_k . g_hat); <= 0 at the exact minimum-norm point."""
    g = weights.direction
    return float(np.max(g @ g - bundle.vectors @ g))
