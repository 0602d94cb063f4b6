"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors are thin wrappers around numpy arrays. Operations executed while a
Tape is active record backward closures on that tape; ``backward`` replays
the records in reverse and returns a gradient per node id. ``detach``
produces a value-sharing tensor through which no gradient flows.
"""

from __future__ import annotations

import itertools
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor", "Tape", "Parameter", "DimensionError", "NumericError",
    "TapeStateError", "backward", "detach", "grad_check",
    "save_checkpoint", "load_checkpoint",
]

_CLAMP = 1e-12
_node_counter = itertools.count()
_TAPES: list["Tape"] = []


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class TapeStateError(RuntimeError):
    """backward called without an active tape, or on a non-scalar."""


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations.

    Entries are (output tensor, [(input tensor, grad_fn)]) in execution
    order; replaying them in reverse implements the chain rule.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, list[tuple[Tensor, object]]]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._records)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data: np.ndarray, parents: list[tuple[Tensor, object]]) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        live = [(t, fn) for t, fn in parents if t.requires_grad]
        if live:
            out.requires_grad = True
            tape._records.append((out, live))
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Run reverse-mode accumulation from a scalar loss.

    Returns a map node_id -> gradient array covering every requires_grad
    ancestor of the loss; detached branches are absent.
    """
    tape = _active_tape()
    if tape is None:
        raise TapeStateError("backward requires an active tape")
    if loss.data.shape != ():
        raise TapeStateError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.array(1.0)}
    for out, parents in reversed(tape._records):
        g = grads.get(out.node_id)
        if g is None:
            continue
        for t, fn in parents:
            gi = np.asarray(fn(g), dtype=np.float64)
            acc = grads.get(t.node_id)
            grads[t.node_id] = gi if acc is None else acc + gi
    return grads


class _DetachReplay:
    """Records detached values on a baseline pass and replays them later.

    Finite differencing a function that contains gradient stops must hold
    the stopped values constant, otherwise the numeric derivative includes
    paths the stops exclude. grad_check uses this to freeze every detached
    value at its baseline.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.recording = True
        self.pos = 0

    def next_value(self, t: "Tensor") -> np.ndarray:
        if self.recording:
            self.values.append(t.data.copy())
            return t.data
        v = self.values[self.pos]
        self.pos += 1
        return v

    def replay(self) -> None:
        self.recording = False
        self.pos = 0


_FREEZE: list[_DetachReplay] = []


@contextmanager
def freeze_detached():
    fr = _DetachReplay()
    _FREEZE.append(fr)
    try:
        yield fr
    finally:
        _FREEZE.pop()


def detach(t: Tensor) -> Tensor:
    """Value-sharing copy through which no gradient flows."""
    if _FREEZE:
        return Tensor(_FREEZE[-1].next_value(t))
    return Tensor(t.data)


# ---------------------------------------------------------------------------
# elementwise / scalar ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a (d,) bias row to every row of an (N, d) matrix."""
    if a.ndim != 2 or b.ndim != 1 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data[None, :],
                 [(a, lambda g: g), (b, lambda g: g.sum(axis=0))])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data,
                 [(a, lambda g: g * b.data), (b, lambda g: g * a.data)])


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, [(a, lambda g: -g)])


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, [(a, lambda g: g * c)])


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, [(a, lambda g: g)])


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise power with the base clamped to [1e-12, inf)."""
    base = np.maximum(a.data, _CLAMP)
    out = base ** p
    mask = (a.data > _CLAMP).astype(np.float64)
    return _make(out, [(a, lambda g: g * p * base ** (p - 1.0) * mask)])


def log(a: Tensor) -> Tensor:
    """Natural log with input clamped to [1e-12, inf)."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log: non-finite input")
    x = np.maximum(a.data, _CLAMP)
    mask = (a.data > _CLAMP).astype(np.float64)
    return _make(np.log(x), [(a, lambda g: g * mask / x)])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))])


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, [(a, lambda g: g * mask)])


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2D matrix (max-subtracted for stability)."""
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2D input, got shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_rows: non-finite input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return out * (g - dot)

    return _make(out, [(a, grad)])


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return _make(out, [(a, lambda g: g * mask)])


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise division; b may also be a scalar tensor."""
    if b.ndim == 0:
        bd = b.data
        return _make(a.data / bd,
                     [(a, lambda g: g / bd),
                      (b, lambda g: np.array(-(g * a.data).sum() / bd ** 2))])
    _check_same_shape(a, b, "div")
    return _make(a.data / b.data,
                 [(a, lambda g: g / b.data),
                  (b, lambda g: -g * a.data / b.data ** 2)])


def div_cols(a: Tensor, b: Tensor) -> Tensor:
    """Divide each row of an (N, d) matrix by the matching (N, 1) entry."""
    if a.ndim != 2 or b.shape != (a.shape[0], 1):
        raise DimensionError(f"div_cols: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data / b.data,
                 [(a, lambda g: g / b.data),
                  (b, lambda g: -(g * a.data / b.data ** 2).sum(axis=1, keepdims=True))])


# ---------------------------------------------------------------------------
# linear algebra / structural ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data @ b.data,
                 [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)])


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, [(a, lambda g: g.T)])


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def sum_all(a: Tensor) -> Tensor:
    shp = a.data.shape
    return _make(np.asarray(a.data.sum()), [(a, lambda g: np.broadcast_to(g, shp))])


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shp = a.data.shape
    return _make(np.asarray(a.data.mean()),
                 [(a, lambda g: np.broadcast_to(g / n, shp))])


def rowsum(a: Tensor) -> Tensor:
    """Sum each row of an (N, d) matrix -> (N,)."""
    if a.ndim != 2:
        raise DimensionError(f"rowsum: expected 2D input, got shape {a.shape}")
    d = a.shape[1]
    return _make(a.data.sum(axis=1),
                 [(a, lambda g: np.repeat(g[:, None], d, axis=1))])


def row_mean(a: Tensor) -> Tensor:
    """Mean over rows of an (N, d) matrix -> (d,)."""
    if a.ndim != 2:
        raise DimensionError(f"row_mean: expected 2D input, got shape {a.shape}")
    n = a.shape[0]
    return _make(a.data.mean(axis=0),
                 [(a, lambda g: np.repeat(g[None, :] / n, n, axis=0))])


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if axis not in (0, 1):
        raise DimensionError(f"concat: axis must be 0 or 1, got {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def slicer(i):
        lo, hi = offsets[i], offsets[i + 1]
        if axis == 0:
            return lambda g: g[lo:hi]
        return lambda g: g[:, lo:hi]

    parents = [(t, slicer(i)) for i, t in enumerate(tensors)]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), parents)


def _segment_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets keyed by ``index``.

    Replacement for ``np.add.at``, which falls back to a slow element-wise
    loop; a sparse selector product runs at memory bandwidth instead.
    """
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n)
    m = len(index)
    if m == 0:
        return np.zeros((n,) + values.shape[1:])
    selector = sparse.csr_matrix(
        (np.ones(m), (index, np.arange(m))), shape=(n, m))
    return selector @ values


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather / permute rows by integer index (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)

    def grad(g):
        return _segment_sum(g, idx, a.shape[0])

    return _make(a.data[idx], [(a, grad)])


def take(a: Tensor, idx) -> Tensor:
    """1D gather."""
    idx = np.asarray(idx, dtype=np.int64)

    def grad(g):
        return _segment_sum(g, idx, a.shape[0])

    return _make(a.data[idx], [(a, grad)])


def pick(a: Tensor, cols) -> Tensor:
    """Pick one column per row of a 2D matrix -> (N,)."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def grad(g):
        out = np.zeros_like(a.data)
        out[rows, cols] = g
        return out

    return _make(a.data[rows, cols], [(a, grad)])


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of an (N, d) matrix by s[i]."""
    if a.ndim != 2 or s.shape != (a.shape[0],):
        raise DimensionError(f"scale_rows: shape mismatch {a.shape} vs {s.shape}")
    return _make(a.data * s.data[:, None],
                 [(a, lambda g: g * s.data[:, None]),
                  (s, lambda g: (g * a.data).sum(axis=1))])


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit L2 norm (norm floored at 1e-12)."""
    if a.ndim != 2:
        raise DimensionError(f"l2_normalize_rows: expected 2D input, got shape {a.shape}")
    norms = np.maximum(np.linalg.norm(a.data, axis=1, keepdims=True), _CLAMP)
    out = a.data / norms

    def grad(g):
        dot = (g * a.data).sum(axis=1, keepdims=True)
        return g / norms - a.data * dot / norms ** 3

    return _make(out, [(a, grad)])


def scatter_sum(values: Tensor, index, n: int) -> Tensor:
    """out[k] = sum of values where index == k; out has length n."""
    index = np.asarray(index, dtype=np.int64)
    out = _segment_sum(values.data, index, n)
    return _make(out, [(values, lambda g: g[index])])


def edge_aggregate(values: Tensor, src, dst, z: Tensor) -> Tensor:
    """Weighted message passing: out[dst[m]] += values[m] * z[src[m]].

    Equivalent to A @ z with A[dst[m], src[m]] = values[m]; kept in edge
    form so cost stays O(M d) instead of O(N^2 d).
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if values.shape != (len(src),):
        raise DimensionError(f"edge_aggregate: {values.shape} values for {len(src)} edges")
    n = z.shape[0]
    a = sparse.csr_matrix((values.data, (dst, src)), shape=(n, n))
    out = a @ z.data

    def grad_values(g):
        return (g[dst] * z.data[src]).sum(axis=1)

    def grad_z(g):
        return a.T @ g

    return _make(out, [(values, grad_values), (z, grad_z)])


def assemble_adjacency(edge_w: Tensor, self_w: Tensor, edges, n: int) -> Tensor:
    """Dense symmetric weighted adjacency with per-node self-loop weights.

    Each directed edge (i, j) contributes its weight at both (i, j) and
    (j, i); self_w fills the diagonal.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edge_w.shape != (len(edges),):
        raise DimensionError(f"assemble_adjacency: {edge_w.shape} weights for {len(edges)} edges")
    if self_w.shape != (n,):
        raise DimensionError(f"assemble_adjacency: {self_w.shape} self weights for {n} nodes")
    a = np.zeros((n, n))
    if len(edges):
        np.add.at(a, (edges[:, 0], edges[:, 1]), edge_w.data)
        np.add.at(a, (edges[:, 1], edges[:, 0]), edge_w.data)
    a[np.diag_indices(n)] += self_w.data

    def grad_edge(g):
        if not len(edges):
            return np.zeros(0)
        return g[edges[:, 0], edges[:, 1]] + g[edges[:, 1], edges[:, 0]]

    return _make(a, [(edge_w, grad_edge), (self_w, lambda g: np.diagonal(g).copy())])


# ---------------------------------------------------------------------------
# parameters, gradient checking, checkpoints

@dataclass
class Parameter:
    """A named trainable tensor with a persistent gradient buffer."""
    name: str
    tensor: Tensor
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.grad is None:
            self.grad = np.zeros_like(self.tensor.data)

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    rel_tol: float
    failures: list

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.rel_tol


def grad_check(f, inputs: list[Tensor], rel_tol: float = 1e-4,
               step: float = 1e-5, max_checks: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar f(*inputs) to central differences.

    Checks every coordinate of every input, or a seeded random subsample
    of max_checks coordinates when the full sweep would be too costly.
    Detached values inside f are frozen at their baseline, so the numeric
    derivative matches the stop-gradient semantics of the tape.
    """
    for t in inputs:
        t.requires_grad = True
    with freeze_detached() as fr:
        with Tape():
            out = f(*inputs)
            grads = backward(out)
        fr.replay()

        coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.data.size)]
        if max_checks is not None and len(coords) > max_checks:
            rng = np.random.default_rng(seed)
            sel = rng.choice(len(coords), size=max_checks, replace=False)
            coords = [coords[k] for k in sel]

        max_err = 0.0
        failures = []
        for i, j in coords:
            flat = inputs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            f_plus = f(*inputs).item()
            fr.replay()
            flat[j] = orig - step
            f_minus = f(*inputs).item()
            fr.replay()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            g = grads.get(inputs[i].node_id)
            analytic = 0.0 if g is None else float(g.reshape(-1)[j])
            denom = max(abs(analytic), abs(numeric), 1e-6)
            err = abs(analytic - numeric) / denom
            if err > max_err:
                max_err = err
            if err >= rel_tol:
                failures.append((i, j, analytic, numeric, err))
    return GradCheckReport(max_err, len(coords), rel_tol, failures)


_CKPT_MAGIC = b"CSDACKPT"
_CKPT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write name -> float64 array mappings as little-endian binary."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(shape)
            arrays[name] = data.astype(np.float64)
    return arrays
