"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D array. A :class:`Tape` records each forward op together
with the context its gradient rule needs; :func:`backward` replays the tape in
reverse. Sparse structure (neighbourhood means, gathers) is passed to ops as
fixed index arrays, so no gradient flows through structural choices.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import partialmethod
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import CheckpointError, NonFiniteError, ShapeError


class Tensor:
    __slots__ = ("data", "id", "requires_grad", "name")

    def __init__(self, data: np.ndarray, id: int, requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.id = id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor#{self.id}{label}{self.shape}"


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    output: int
    ctx: object
    attrs: dict


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {a.shape}")
    return a


def _broadcast_shape(kind, a, b):
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{kind}: incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _safe_normalize(x: np.ndarray):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return x * inv, inv


def _normalize_grad(g_hat, x_hat, inv):
    # d(x/|x|) = (g - x_hat * <x_hat, g>) / |x|; zero rows get zero gradient
    return (g_hat - x_hat * (x_hat * g_hat).sum(axis=1, keepdims=True)) * inv


def _segment_matrix(dst, src, n_out, n_in, mean):
    dst = np.asarray(dst, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    w = np.ones(dst.size)
    if mean and dst.size:
        counts = np.bincount(dst, minlength=n_out).astype(np.float64)
        w = 1.0 / counts[dst]
    return sp.csr_matrix((w, (dst, src)), shape=(n_out, n_in))


# -- op rules ---------------------------------------------------------------
# forward(attrs, *arrays) -> (out, ctx); backward(g, attrs, ctx, out, *arrays) -> grads


def _check_same_rows(kind, *xs):
    rows = {x.shape[0] for x in xs}
    if len(rows) > 1:
        raise ShapeError(f"{kind}: row counts differ {[x.shape for x in xs]}")


def _matmul_f(attrs, a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b, None


def _matmul_b(g, attrs, ctx, out, a, b):
    return g @ b.T, a.T @ g


def _add_f(attrs, a, b):
    _broadcast_shape("add", a.shape, b.shape)
    return a + b, None


def _add_b(g, attrs, ctx, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_f(attrs, a, b):
    _broadcast_shape("subtract", a.shape, b.shape)
    return a - b, None


def _sub_b(g, attrs, ctx, out, a, b):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _had_f(attrs, a, b):
    _broadcast_shape("hadamard", a.shape, b.shape)
    return a * b, None


def _had_b(g, attrs, ctx, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _concat_f(attrs, *xs):
    _check_same_rows("concat_cols", *xs)
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def _concat_b(g, attrs, ctx, out, *xs):
    cuts = np.cumsum(ctx)[:-1]
    return tuple(np.split(g, cuts, axis=1))


def _concat_rows_f(attrs, *xs):
    cols = {x.shape[1] for x in xs}
    if len(cols) > 1:
        raise ShapeError(f"concat_rows: column counts differ {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=0), [x.shape[0] for x in xs]


def _concat_rows_b(g, attrs, ctx, out, *xs):
    cuts = np.cumsum(ctx)[:-1]
    return tuple(np.split(g, cuts, axis=0))


def _gather_f(attrs, x):
    idx = np.asarray(attrs["index"], dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"row_gather: index out of range for {x.shape[0]} rows")
    return x[idx], idx


def _gather_b(g, attrs, ctx, out, x):
    gx = np.zeros_like(x)
    np.add.at(gx, ctx, g)
    return (gx,)


def _colgather_f(attrs, x):
    idx = np.asarray(attrs["index"], dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError(f"col_gather: index out of range for {x.shape[1]} columns")
    return x[:, idx], idx


def _colgather_b(g, attrs, ctx, out, x):
    gx = np.zeros_like(x)
    np.add.at(gx.T, ctx, g.T)
    return (gx,)


def _segment_f(mean):
    def fwd(attrs, x):
        n_out = int(attrs["n_out"])
        m = _segment_matrix(attrs["dst"], attrs["src"], n_out, x.shape[0], mean)
        return np.asarray(m @ x), m
    return fwd


def _segment_b(g, attrs, ctx, out, x):
    return (np.asarray(ctx.T @ g),)


def _sigmoid_f(attrs, x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, None


def _sigmoid_b(g, attrs, ctx, out, x):
    return (g * out * (1.0 - out),)


def _logsig_f(attrs, x):
    # log(sigmoid(x)) = -softplus(-x), computed without overflow
    return -np.logaddexp(0.0, -x), None


def _logsig_b(g, attrs, ctx, out, x):
    s, _ = _sigmoid_f(attrs, -x)
    return (g * s,)


def _tanh_f(attrs, x):
    return np.tanh(x), None


def _tanh_b(g, attrs, ctx, out, x):
    return (g * (1.0 - out * out),)


def _relu_f(attrs, x):
    return np.maximum(x, 0.0), None


def _relu_b(g, attrs, ctx, out, x):
    return (g * (x > 0),)


def _softmax_f(attrs, x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True), None


def _softmax_b(g, attrs, ctx, out, x):
    return (out * (g - (g * out).sum(axis=1, keepdims=True)),)


def _cosine_f(attrs, a, b):
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_rows: widths differ {a.shape} vs {b.shape}")
    a_hat, a_inv = _safe_normalize(a)
    b_hat, b_inv = _safe_normalize(b)
    return a_hat @ b_hat.T, (a_hat, a_inv, b_hat, b_inv)


def _cosine_b(g, attrs, ctx, out, a, b):
    a_hat, a_inv, b_hat, b_inv = ctx
    ga = _normalize_grad(g @ b_hat, a_hat, a_inv)
    gb = _normalize_grad(g.T @ a_hat, b_hat, b_inv)
    return ga, gb


def _normrows_f(attrs, x):
    x_hat, inv = _safe_normalize(x)
    return x_hat, inv


def _normrows_b(g, attrs, ctx, out, x):
    return (_normalize_grad(g, out, ctx),)


def _scalar_f(attrs, x):
    return x * float(attrs["c"]), None


def _scalar_b(g, attrs, ctx, out, x):
    return (g * float(attrs["c"]),)


def _reduce_f(mean):
    def fwd(attrs, x):
        axis = attrs.get("axis")
        out = x.mean(axis=axis, keepdims=True) if mean else x.sum(axis=axis, keepdims=True)
        return np.asarray(out).reshape(1, 1) if axis is None else out, None
    return fwd


def _reduce_b(mean):
    def bwd(g, attrs, ctx, out, x):
        axis = attrs.get("axis")
        gx = np.broadcast_to(g, x.shape).copy()
        if mean:
            gx /= x.size if axis is None else x.shape[axis]
        return (gx,)
    return bwd


def _log_f(attrs, x):
    if (x <= 0).any():
        raise NonFiniteError("log: non-positive argument")
    return np.log(x), None


def _log_b(g, attrs, ctx, out, x):
    return (g / x,)


def _clamp_f(attrs, x):
    return np.maximum(x, float(attrs["lo"])), None


def _clamp_b(g, attrs, ctx, out, x):
    return (g * (x >= float(attrs["lo"])),)


def _transpose_f(attrs, x):
    return x.T.copy(), None


def _transpose_b(g, attrs, ctx, out, x):
    return (g.T,)


def _rsqrt_f(attrs, x):
    pos = x > 0
    out = np.zeros_like(x)
    out[pos] = 1.0 / np.sqrt(x[pos])
    return out, pos


def _rsqrt_b(g, attrs, ctx, out, x):
    return (np.where(ctx, -0.5 * out ** 3, 0.0) * g,)


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_f, _matmul_b),
    "add": (_add_f, _add_b),
    "subtract": (_sub_f, _sub_b),
    "hadamard": (_had_f, _had_b),
    "concat_cols": (_concat_f, _concat_b),
    "concat_rows": (_concat_rows_f, _concat_rows_b),
    "row_gather": (_gather_f, _gather_b),
    "col_gather": (_colgather_f, _colgather_b),
    "segment_mean": (_segment_f(True), _segment_b),
    "segment_sum": (_segment_f(False), _segment_b),
    "sigmoid": (_sigmoid_f, _sigmoid_b),
    "log_sigmoid": (_logsig_f, _logsig_b),
    "tanh": (_tanh_f, _tanh_b),
    "relu": (_relu_f, _relu_b),
    "softmax_rows": (_softmax_f, _softmax_b),
    "cosine_rows": (_cosine_f, _cosine_b),
    "normalize_rows": (_normrows_f, _normrows_b),
    "scalar_mul": (_scalar_f, _scalar_b),
    "reduce_mean": (_reduce_f(True), _reduce_b(True)),
    "reduce_sum": (_reduce_f(False), _reduce_b(False)),
    "log": (_log_f, _log_b),
    "clamp_min": (_clamp_f, _clamp_b),
    "transpose": (_transpose_f, _transpose_b),
    "rsqrt_safe": (_rsqrt_f, _rsqrt_b),
}


class Tape:
    """Ordered record of forward ops. Use one tape per forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[Tensor] = []
        self._params: dict[str, Tensor] = {}

    def _new(self, data, requires_grad=False, name=None) -> Tensor:
        t = Tensor(data, len(self.values), requires_grad, name)
        self.values.append(t)
        return t

    def leaf(self, data, *, requires_grad: bool = False, name: str | None = None) -> Tensor:
        data = _as_matrix(data)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"leaf {name or ''} has non-finite values")
        return self._new(data, requires_grad, name)

    def constant(self, data) -> Tensor:
        return self.leaf(data)

    def param(self, store: "ParamStore", name: str) -> Tensor:
        if name not in self._params:
            self._params[name] = self.leaf(store[name], requires_grad=True, name=name)
        return self._params[name]

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def record(self, kind: str, *inputs: Tensor, **attrs) -> Tensor:
        try:
            fwd, _ = OPS[kind]
        except KeyError:
            raise ValueError(f"unknown op {kind!r}") from None
        out, ctx = fwd(attrs, *(t.data for t in inputs))
        out = _as_matrix(out)
        if not np.isfinite(out).all():
            raise NonFiniteError(f"{kind}: non-finite output")
        node_out = self._new(out, any(t.requires_grad for t in inputs))
        self.nodes.append(Node(kind, tuple(t.id for t in inputs), node_out.id, ctx, attrs))
        return node_out


for _kind in OPS:
    setattr(Tape, _kind, partialmethod(Tape.record, _kind))


def backward(tape: Tape, loss: Tensor, store: "ParamStore | None" = None) -> dict[str, np.ndarray]:
    """Gradients of a 1x1 ``loss`` for every parameter on the tape.

    With ``store`` given, parameters that never entered the tape get zeros too.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
    values = tape.values
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        inputs = [values[i] for i in node.inputs]
        _, bwd = OPS[node.kind]
        in_grads = bwd(g, node.attrs, node.ctx, values[node.output].data, *(t.data for t in inputs))
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
    out = {}
    for name, t in tape._params.items():
        out[name] = grads.get(t.id, np.zeros_like(t.data))
    if store is not None:
        for name in store.names:
            out.setdefault(name, np.zeros_like(store[name]))
    return out


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class ParamStore:
    """Named learnable matrices plus Adam moments."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._params: dict[str, np.ndarray] = {}
        self.adam = AdamState()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        self._params[name] = _as_matrix(value).copy()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name, value):
        value = _as_matrix(value)
        if value.shape != self._params[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self._params[name].shape}")
        self._params[name] = value

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    @property
    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return ((n, self._params[n]) for n in self.names)

    def copy(self) -> "ParamStore":
        other = ParamStore({n: v for n, v in self.items()})
        other.adam = AdamState(
            {k: v.copy() for k, v in self.adam.m.items()},
            {k: v.copy() for k, v in self.adam.v.items()},
            self.adam.step,
        )
        return other

    def sq_norm(self) -> float:
        return float(sum((v * v).sum() for _, v in self.items()))


def adam_step(store: ParamStore, gradients: dict[str, np.ndarray], lr: float = 1e-3,
              l2: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> ParamStore:
    """One Adam update in place. ``l2`` adds ``l2 * theta`` to each gradient."""
    b1, b2 = betas
    st = store.adam
    st.step += 1
    c1 = 1.0 - b1 ** st.step
    c2 = 1.0 - b2 ** st.step
    for name in store.names:
        theta = store[name]
        g = gradients.get(name)
        if g is None:
            g = np.zeros_like(theta)
        elif g.shape != theta.shape:
            raise ShapeError(f"gradient for {name}: {g.shape} != {theta.shape}")
        if l2:
            g = g + l2 * theta
        m = st.m.get(name)
        v = st.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        st.m[name], st.v[name] = m, v
        store[name] = theta - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def finite_diff_check(loss_fn: Callable[[ParamStore], tuple[Tape, Tensor]], params: ParamStore,
                      epsilon: float = 1e-4, names=None, n_samples: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn(store)`` must build a fresh tape and return ``(tape, loss)``.
    ``n_samples`` caps the coordinates checked per parameter.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    tape, loss = loss_fn(params)
    grads = backward(tape, loss, params)
    worst = 0.0
    for name in names or params.names:
        theta = params[name]
        flat = theta.reshape(-1)
        coords = np.arange(flat.size)
        if n_samples is not None and n_samples < flat.size:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        g_ad = grads[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            up = float(loss_fn(params)[1].data[0, 0])
            flat[c] = orig - epsilon
            down = float(loss_fn(params)[1].data[0, 0])
            flat[c] = orig
            g_fd = (up - down) / (2 * epsilon)
            err = abs(g_ad[c] - g_fd) / max(1e-8, abs(g_ad[c]) + abs(g_fd))
            worst = max(worst, err)
    return worst


# -- checkpoint container ---------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..7    magic b"NUTRCKPT"
#   bytes 8..11   uint32 format version
#   bytes 12..19  uint64 header length H
#   next H bytes  UTF-8 JSON: {"manifest": {...}, "params": [{"name", "shape", "offset"}]}
#   payload       float64 little-endian values, row-major, in header order
#   last 32 bytes SHA-256 of everything before it

MAGIC = b"NUTRCKPT"
FORMAT_VERSION = 1


def save_checkpoint(store: ParamStore, path, manifest: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, value in store.items():
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(value.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"manifest": manifest or {}, "params": entries}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 20 + 32 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint or corrupted (bad header)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
        )
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checkpoint corrupted or truncated (checksum mismatch)")
    header = json.loads(body[20:20 + hlen])
    payload = body[20 + hlen:]
    store = ParamStore()
    for e in header["params"]:
        n = int(np.prod(e["shape"])) * 8
        raw = payload[e["offset"]:e["offset"] + n]
        if len(raw) != n:
            raise CheckpointError(f"{path}: parameter {e['name']} truncated")
        store.add(e["name"], np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64))
    manifest = header["manifest"]
    store.adam.step = int(manifest.get("step", 0))
    return store, manifest
