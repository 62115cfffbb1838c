"""Reverse-mode automatic differentiation on a fixed operation set.

A ``Tape`` records every operation applied to its values during one
forward pass; ``backward`` replays the records in exact reverse order,
so gradient accumulation order is a pure function of the forward
program and results are reproducible to the bit. Sparse matrices enter
only as constants of ``spmm``; everything else is dense numpy.

The operation set is closed: encoders, hypergraph convolutions, the
structure filters, and the contrastive objective are all composed from
the primitives here, and each primitive carries a hand-written
vector-Jacobian product that ``finite_diff_check`` can audit against
central differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class TapeError(ValueError):
    """Raised on malformed tape usage: shape mismatches, foreign values,
    backward from a non-scalar or unrecorded value."""


class Parameter:
    """A named trainable leaf. ``grad`` is populated by ``Tape.backward``."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.ascontiguousarray(data)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Value:
    """A node on a tape. Do not construct directly; use tape methods."""

    __slots__ = ("tape", "index", "data")

    def __init__(self, tape: "Tape", index: int, data: np.ndarray):
        self.tape = tape
        self.index = index
        self.data = data

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __add__(self, other: "Value") -> "Value":
        return self.tape.add(self, other)

    def __sub__(self, other: "Value") -> "Value":
        return self.tape.sub(self, other)

    def __mul__(self, other: "Value") -> "Value":
        return self.tape.mul(self, other)

    def __matmul__(self, other: "Value") -> "Value":
        return self.tape.matmul(self, other)

    def __neg__(self) -> "Value":
        return self.tape.scale(self, -1.0)


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents: tuple[int, ...], vjp):
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Operation recorder. One tape per forward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._watched: dict[int, tuple[Parameter, int]] = {}

    # -- leaves ---------------------------------------------------------

    def constant(self, data: np.ndarray) -> Value:
        """A leaf that receives no gradient."""
        return self._record(np.asarray(data), (), None)

    def watch(self, param: Parameter) -> Value:
        """A leaf whose gradient is written back to ``param.grad``.

        Watching the same parameter twice returns the same value, so all
        uses share one accumulation slot.
        """
        key = id(param)
        if key in self._watched:
            param_, index = self._watched[key]
            return Value(self, index, param_.data)
        value = self._record(param.data, (), None)
        self._watched[key] = (param, value.index)
        return value

    def _record(self, data: np.ndarray, parents: tuple[int, ...], vjp) -> Value:
        self._nodes.append(_Node(parents, vjp))
        return Value(self, len(self._nodes) - 1, data)

    def _own(self, value: Value, op: str) -> Value:
        if not isinstance(value, Value) or value.tape is not self:
            raise TapeError(f"{op}: operand was not recorded on this tape")
        return value

    # -- arithmetic -----------------------------------------------------

    def add(self, a: Value, b: Value) -> Value:
        a, b = self._own(a, "add"), self._own(b, "add")
        if a.shape != b.shape:
            raise TapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return self._record(a.data + b.data, (a.index, b.index),
                            lambda g: (g, g))

    def sub(self, a: Value, b: Value) -> Value:
        a, b = self._own(a, "sub"), self._own(b, "sub")
        if a.shape != b.shape:
            raise TapeError(f"sub: shapes {a.shape} and {b.shape} differ")
        return self._record(a.data - b.data, (a.index, b.index),
                            lambda g: (g, -g))

    def mul(self, a: Value, b: Value) -> Value:
        a, b = self._own(a, "mul"), self._own(b, "mul")
        if a.shape != b.shape:
            raise TapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        ad, bd = a.data, b.data
        return self._record(ad * bd, (a.index, b.index),
                            lambda g: (g * bd, g * ad))

    def scale(self, x: Value, c: float) -> Value:
        x = self._own(x, "scale")
        c = float(c)
        return self._record(x.data * c, (x.index,), lambda g: (g * c,))

    def add_bias(self, x: Value, bias: Value) -> Value:
        x, bias = self._own(x, "add_bias"), self._own(bias, "add_bias")
        if bias.shape != (x.shape[-1],):
            raise TapeError(
                f"add_bias: bias shape {bias.shape} does not match "
                f"last dim of {x.shape}")
        return self._record(x.data + bias.data, (x.index, bias.index),
                            lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))

    def colvec_scale(self, x: Value, v: Value) -> Value:
        """Scale row i of the matrix ``x`` by scalar ``v[i]``."""
        x, v = self._own(x, "colvec_scale"), self._own(v, "colvec_scale")
        if x.data.ndim != 2 or v.shape != (x.shape[0],):
            raise TapeError(
                f"colvec_scale: need (n, d) and (n,), got {x.shape} and {v.shape}")
        xd, vd = x.data, v.data
        return self._record(xd * vd[:, None], (x.index, v.index),
                            lambda g: (g * vd[:, None], (g * xd).sum(axis=1)))

    # -- linear algebra -------------------------------------------------

    def matmul(self, a: Value, b: Value) -> Value:
        a, b = self._own(a, "matmul"), self._own(b, "matmul")
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise TapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
        ad, bd = a.data, b.data
        return self._record(ad @ bd, (a.index, b.index),
                            lambda g: (g @ bd.T, ad.T @ g))

    def spmm(self, matrix: sp.spmatrix, x: Value) -> Value:
        """Multiply by a constant sparse matrix from the left."""
        x = self._own(x, "spmm")
        if not sp.issparse(matrix):
            raise TapeError("spmm: left operand must be a sparse matrix")
        if x.data.ndim != 2 or matrix.shape[1] != x.shape[0]:
            raise TapeError(
                f"spmm: shapes {matrix.shape} and {x.shape} do not chain")
        matrix = matrix.tocsr()
        mt = matrix.T.tocsr()
        return self._record(np.asarray(matrix @ x.data), (x.index,),
                            lambda g: (np.asarray(mt @ g),))

    def transpose(self, x: Value) -> Value:
        x = self._own(x, "transpose")
        if x.data.ndim != 2:
            raise TapeError(f"transpose: need a matrix, got shape {x.shape}")
        return self._record(np.ascontiguousarray(x.data.T), (x.index,),
                            lambda g: (np.ascontiguousarray(g.T),))

    def reshape(self, x: Value, shape: tuple) -> Value:
        x = self._own(x, "reshape")
        old = x.data.shape
        data = x.data.reshape(shape)
        return self._record(data, (x.index,), lambda g: (g.reshape(old),))

    def concat_cols(self, a: Value, b: Value) -> Value:
        a, b = self._own(a, "concat_cols"), self._own(b, "concat_cols")
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
            raise TapeError(
                f"concat_cols: shapes {a.shape} and {b.shape} do not align")
        da = a.shape[1]
        return self._record(np.concatenate([a.data, b.data], axis=1),
                            (a.index, b.index),
                            lambda g: (g[:, :da], g[:, da:]))

    # -- nonlinearities -------------------------------------------------

    def sigmoid(self, x: Value) -> Value:
        x = self._own(x, "sigmoid")
        xd = x.data
        y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                     np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
        y = y.astype(xd.dtype, copy=False)
        return self._record(y, (x.index,), lambda g: (g * y * (1.0 - y),))

    def prelu(self, x: Value, slope: Value) -> Value:
        """max(0, x) + slope * min(0, x) with a single learnable slope."""
        x, slope = self._own(x, "prelu"), self._own(slope, "prelu")
        if slope.shape != (1,):
            raise TapeError(f"prelu: slope must have shape (1,), got {slope.shape}")
        xd, a = x.data, slope.data[0]
        neg = np.minimum(xd, 0.0)
        y = np.maximum(xd, 0.0) + a * neg
        return self._record(
            y.astype(xd.dtype, copy=False), (x.index, slope.index),
            lambda g: (g * np.where(xd >= 0, 1.0, a).astype(g.dtype),
                       np.array([(g * neg).sum()], dtype=g.dtype)))

    def elu(self, x: Value) -> Value:
        x = self._own(x, "elu")
        xd = x.data
        expm = np.exp(np.minimum(xd, 0.0)) - 1.0
        y = np.where(xd >= 0, xd, expm).astype(xd.dtype, copy=False)
        return self._record(y, (x.index,),
                            lambda g: (g * np.where(xd >= 0, 1.0, expm + 1.0)
                                       .astype(g.dtype),))

    def exp(self, x: Value) -> Value:
        x = self._own(x, "exp")
        y = np.exp(x.data)
        return self._record(y, (x.index,), lambda g: (g * y,))

    def log(self, x: Value) -> Value:
        x = self._own(x, "log")
        xd = x.data
        if np.any(xd <= 0):
            raise TapeError("log: operand must be strictly positive")
        return self._record(np.log(xd), (x.index,), lambda g: (g / xd,))

    # -- reductions and indexing ---------------------------------------

    def l2norm_rows(self, x: Value, eps: float = 1e-12) -> Value:
        """Normalize each row to unit Euclidean norm; rows shorter than
        ``eps`` map to zero and pass no gradient."""
        x = self._own(x, "l2norm_rows")
        if x.data.ndim != 2:
            raise TapeError(f"l2norm_rows: need a matrix, got shape {x.shape}")
        xd = x.data
        norms = np.sqrt((xd * xd).sum(axis=1))
        safe = norms > eps
        denom = np.where(safe, norms, 1.0)
        y = (xd / denom[:, None]) * safe[:, None]
        y = y.astype(xd.dtype, copy=False)

        def vjp(g):
            inner = (g * y).sum(axis=1)
            gx = (g - y * inner[:, None]) / denom[:, None]
            return (gx * safe[:, None],)

        return self._record(y, (x.index,), vjp)

    def logsumexp_rows(self, x: Value) -> Value:
        x = self._own(x, "logsumexp_rows")
        if x.data.ndim != 2:
            raise TapeError(f"logsumexp_rows: need a matrix, got shape {x.shape}")
        xd = x.data
        m = xd.max(axis=1)
        e = np.exp(xd - m[:, None])
        s = e.sum(axis=1)
        y = (m + np.log(s)).astype(xd.dtype, copy=False)
        soft = e / s[:, None]
        return self._record(y, (x.index,), lambda g: (g[:, None] * soft,))

    def rowsum(self, x: Value) -> Value:
        x = self._own(x, "rowsum")
        if x.data.ndim != 2:
            raise TapeError(f"rowsum: need a matrix, got shape {x.shape}")
        ones = np.ones_like(x.data[0])
        return self._record(x.data.sum(axis=1), (x.index,),
                            lambda g: (g[:, None] * ones[None, :],))

    def gather_rows(self, x: Value, indices: np.ndarray) -> Value:
        x = self._own(x, "gather_rows")
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 1:
            raise TapeError("gather_rows: indices must be one-dimensional")
        if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
            raise TapeError("gather_rows: index out of range")
        xd = x.data

        def vjp(g):
            out = np.zeros_like(xd)
            np.add.at(out, indices, g)
            return (out,)

        return self._record(xd[indices], (x.index,), vjp)

    def segment_sum(self, x: Value, segments: np.ndarray,
                    num_segments: int) -> Value:
        """Sum rows (or scalars) of ``x`` into ``num_segments`` buckets."""
        x = self._own(x, "segment_sum")
        segments = np.asarray(segments, dtype=np.int64)
        if segments.shape != (x.shape[0],):
            raise TapeError(
                f"segment_sum: segment ids shape {segments.shape} does not "
                f"match first dim of {x.shape}")
        if segments.size and (segments.min() < 0
                              or segments.max() >= num_segments):
            raise TapeError("segment_sum: segment id out of range")
        out_shape = (num_segments,) + x.data.shape[1:]
        out = np.zeros(out_shape, dtype=x.data.dtype)
        np.add.at(out, segments, x.data)
        return self._record(out, (x.index,), lambda g: (g[segments],))

    def sum_all(self, x: Value) -> Value:
        x = self._own(x, "sum_all")
        xd = x.data
        return self._record(np.asarray(xd.sum()), (x.index,),
                            lambda g: (np.broadcast_to(g, xd.shape).astype(
                                g.dtype, copy=False),))

    # -- reverse pass ---------------------------------------------------

    def backward(self, value: Value) -> dict[str, np.ndarray]:
        """Propagate d(value)/d(leaf) to every watched parameter.

        ``value`` must be a scalar recorded on this tape. Nodes are
        visited strictly in reverse recording order. Returns a name-to-
        gradient map and stores each gradient on its parameter.
        """
        if not isinstance(value, Value) or value.tape is not self:
            raise TapeError("backward: value was not recorded on this tape")
        if not 0 <= value.index < len(self._nodes):
            raise TapeError("backward: value was not recorded on this tape")
        if value.data.shape != ():
            raise TapeError(
                f"backward: need a scalar, got shape {value.data.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[value.index] = np.ones((), dtype=value.data.dtype)
        for i in range(value.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self._nodes[i]
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if grads[parent] is None:
                    grads[parent] = np.array(pg, copy=True)
                else:
                    grads[parent] = grads[parent] + pg
        out: dict[str, np.ndarray] = {}
        for param, index in self._watched.values():
            g = grads[index]
            if g is None:
                g = np.zeros_like(param.data)
            param.grad = np.asarray(g, dtype=param.data.dtype)
            out[param.name] = param.grad
        return out


# -- gradient auditing -------------------------------------------------


@dataclass
class FiniteDiffReport:
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst_param: str = ""
    worst_coord: tuple = ()

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def finite_diff_check(fn, params: list[Parameter], epsilon: float = 1e-5,
                      max_coords: int = 32, tolerance: float = 1e-4,
                      seed: int = 0) -> FiniteDiffReport:
    """Audit reverse-mode gradients of ``fn`` against central differences.

    ``fn`` takes no arguments, reads the parameters' current data, and
    returns a scalar value on a fresh tape. Up to ``max_coords``
    coordinates per parameter are probed. Relative error per coordinate
    is |ad - fd| / max(1e-8, |ad| + |fd|).

    Raises if ``epsilon`` is not a positive finite number or if two
    evaluations at the same point disagree (the function is then not a
    deterministic function of the parameters and the audit is void).
    """
    if not np.isfinite(epsilon) or epsilon <= 0:
        raise TapeError(f"finite_diff_check: epsilon must be positive and "
                        f"finite, got {epsilon}")
    first = fn()
    base = float(first.data)
    if float(fn().data) != base:
        raise TapeError("finite_diff_check: fn is not deterministic; "
                        "two evaluations at the same point disagree")
    first.tape.backward(first)
    analytic = {p.name: np.array(p.grad, copy=True) for p in params}

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    report = FiniteDiffReport(tolerance=tolerance)
    worst = -1.0
    for p in params:
        size = p.data.size
        n_probe = min(max_coords, size)
        coords = rng.choice(size, size=n_probe, replace=False)
        flat = p.data.reshape(-1)
        err = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            plus = float(fn().data)
            flat[c] = orig - epsilon
            minus = float(fn().data)
            flat[c] = orig
            fd = (plus - minus) / (2.0 * epsilon)
            ad = float(analytic[p.name].reshape(-1)[c])
            rel = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
            if rel > err:
                err = rel
            if rel > worst:
                worst = rel
                report.worst_param = p.name
                report.worst_coord = tuple(np.unravel_index(c, p.data.shape))
        report.per_param[p.name] = err
    return report


# -- optimization ------------------------------------------------------


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise TapeError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise TapeError("betas must lie in [0, 1)")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        """Apply one update from the gradients currently on the parameters."""
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                raise TapeError(f"parameter {p.name!r} has no gradient")
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (self.lr * (m / b1t)
                      / (np.sqrt(v / b2t) + self.eps))
            p.data -= update.astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params:
            out[f"adam.m:{p.name}"] = self.m[p.name]
            out[f"adam.v:{p.name}"] = self.v[p.name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        for p in self.params:
            self.m[p.name] = np.array(arrays[f"adam.m:{p.name}"],
                                      dtype=p.data.dtype)
            self.v[p.name] = np.array(arrays[f"adam.v:{p.name}"],
                                      dtype=p.data.dtype)


# -- checkpoints -------------------------------------------------------

_DTYPE_TAGS = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_checkpoint(path, arrays: dict[str, np.ndarray],
                    metadata: dict | None = None) -> None:
    """Write named float arrays as a one-line JSON header followed by the
    raw little-endian array bytes, concatenated in header order."""
    import json

    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if np.dtype(dtype) not in _DTYPE_TAGS:
            raise TapeError(
                f"checkpoint arrays must be float32 or float64; "
                f"{name!r} has dtype {arr.dtype}")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": _DTYPE_TAGS[np.dtype(dtype)],
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format": "relsep-checkpoint", "version": 1,
                         "entries": entries, "metadata": metadata or {}})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    import json

    with open(path, "rb") as fh:
        header_line = fh.readline()
        body = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TapeError(f"not a checkpoint file: {exc}") from exc
    if header.get("format") != "relsep-checkpoint":
        raise TapeError("not a checkpoint file: bad format tag")
    arrays = {}
    for entry in header["entries"]:
        dtype = _TAG_DTYPES[entry["dtype"]]
        start, nbytes = entry["offset"], entry["nbytes"]
        flat = np.frombuffer(body[start:start + nbytes], dtype=dtype)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).copy()
    return arrays, header.get("metadata", {})
