"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active::

    with Tape() as tape:
        loss = reduce("sum", matmul(x, w))
    grads = tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what inference
uses.  There is no implicit broadcasting: per-row and per-column scaling and
bias addition are separate named ops.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_NORM = 1e-12

UNARY_KINDS = ("sigmoid", "relu", "exp", "log", "neg")
REDUCE_KINDS = ("sum", "mean", "max_over_axis")


class TensorError(ValueError):
    """Base class for tensor contract violations."""


class ShapeError(TensorError):
    pass


class DomainError(TensorError):
    pass


class DegenerateRowError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


def seq_sum(X: np.ndarray, axis: int | None = None, keepdims: bool = False) -> np.ndarray:
    """Sum accumulated strictly in ascending index order (numpy's default is pairwise)."""
    if axis is None:
        total = np.cumsum(X.ravel())[-1] if X.size else 0.0
        return np.array([[total]]) if keepdims else np.float64(total)
    if X.shape[axis] == 0:
        return np.zeros(X.shape[:axis] + ((1,) if keepdims else ()) + X.shape[axis + 1:])
    out = np.take(np.cumsum(X, axis=axis), -1, axis=axis)
    return np.expand_dims(out, axis) if keepdims else out


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{what}: non-finite value at index {tuple(int(i) for i in bad)}")


class Tensor:
    """A 2-D float64 array that may take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got {arr.ndim}-D input")
        _check_finite(arr, "Tensor creation")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, what: str) -> "Tensor":
        _check_finite(arr, what)
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False, "detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Thin operator sugar over the named ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return apply_unary("neg", self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops execute, so the list is already topologically
    ordered.  A tape belongs to a single worker; nesting is allowed and the
    innermost tape records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None
        self._ids: set[int] = set()

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable) -> None:
        self.nodes.append(_Node(inputs, output, backward))
        self._ids.add(id(output))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


def _record(out_arr: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, what: str) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, needs, what)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Gradients are accumulated into ``.grad`` of every leaf that has
    ``requires_grad`` set (leaves are tensors not produced on this tape).
    Returns a map from ``id(tensor)`` to its gradient for every tensor reached.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.shape}")
    if loss not in tape:
        raise TensorError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if t not in tape:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
    return grads


# ---------------------------------------------------------------- primitives


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _record(A @ B, (a, b), bw, "matmul")


def transpose(x: Tensor) -> Tensor:
    return _record(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    A, B = a.data, b.data
    if (B == 0).any():
        raise DomainError("div: zero divisor")
    return _record(A / B, (a, b), lambda g: (g / B, -g * A / (B * B)), "div")


def scale(x: Tensor, c: float) -> Tensor:
    return _record(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_const(x: Tensor, c: float) -> Tensor:
    return _record(x.data + c, (x,), lambda g: (g,), "add_const")


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the 1x1 tensor ``s``."""
    if s.shape != (1, 1):
        raise ShapeError(f"scale_by: scalar must be 1x1, got {s.shape}")
    X, c = x.data, s.data[0, 0]
    return _record(X * c, (x, s), lambda g: (g * c, np.array([[np.sum(g * X)]])), "scale_by")


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` a 1 x cols row vector added to every row."""
    if b.rows != 1 or b.cols != x.cols:
        raise ShapeError(f"add_row: bias must be 1x{x.cols}, got {b.shape}")
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)), "add_row")


def add_col(x: Tensor, c: Tensor) -> Tensor:
    """``x + c`` with ``c`` a rows x 1 column added to every column."""
    if c.cols != 1 or c.rows != x.rows:
        raise ShapeError(f"add_col: column must be {x.rows}x1, got {c.shape}")
    return _record(x.data + c.data, (x, c), lambda g: (g, g.sum(axis=1, keepdims=True)), "add_col")


def mul_col(x: Tensor, s: Tensor) -> Tensor:
    """Scale row ``i`` of ``x`` by ``s[i, 0]``."""
    if s.cols != 1 or s.rows != x.rows:
        raise ShapeError(f"mul_col: scale must be {x.rows}x1, got {s.shape}")
    X, S = x.data, s.data
    return _record(X * S, (x, s), lambda g: (g * S, (g * X).sum(axis=1, keepdims=True)), "mul_col")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def apply_unary(kind: str, x: Tensor) -> Tensor:
    X = x.data
    if kind == "sigmoid":
        y = _sigmoid(X)
        bw = lambda g: (g * y * (1.0 - y),)  # noqa: E731
    elif kind == "relu":
        mask = X > 0
        y = np.where(mask, X, 0.0)
        bw = lambda g: (g * mask,)  # noqa: E731
    elif kind == "exp":
        with np.errstate(over="ignore"):
            y = np.exp(X)
        bw = lambda g: (g * y,)  # noqa: E731
    elif kind == "log":
        if (X <= 0).any():
            bad = tuple(int(i) for i in np.argwhere(X <= 0)[0])
            raise DomainError(f"log: non-positive entry {X[bad]!r} at index {bad}")
        y = np.log(X)
        bw = lambda g: (g / X,)  # noqa: E731
    elif kind == "neg":
        y = -X
        bw = lambda g: (-g,)  # noqa: E731
    else:
        raise ValueError(f"unknown unary op {kind!r}; expected one of {UNARY_KINDS}")
    return _record(y, (x,), bw, kind)


def sigmoid(x: Tensor) -> Tensor:
    return apply_unary("sigmoid", x)


def relu(x: Tensor) -> Tensor:
    return apply_unary("relu", x)


def exp(x: Tensor) -> Tensor:
    return apply_unary("exp", x)


def log(x: Tensor) -> Tensor:
    return apply_unary("log", x)


def clamp_min(x: Tensor, floor: float) -> tuple[Tensor, int]:
    """Clamp entries below ``floor``; returns the tensor and the clamp count.

    Clamped entries pass no gradient.
    """
    X = x.data
    mask = X >= floor
    return _record(np.where(mask, X, floor), (x,), lambda g: (g * mask,), "clamp_min"), int((~mask).sum())


def softmax_rows(x: Tensor) -> Tensor:
    X = x.data
    e = np.exp(X - X.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record(y, (x,), bw, "softmax_rows")


def l2_normalize_rows(x: Tensor, eps: float = EPS_NORM) -> Tensor:
    X = x.data
    norms = np.sqrt(seq_sum(X * X, axis=1, keepdims=True))
    if (norms < eps).any():
        row = int(np.argmax(norms < eps))
        raise DegenerateRowError(f"l2_normalize_rows: row {row} has norm {float(norms[row, 0])!r} < {eps}")
    y = X / norms

    def bw(g):
        # (I - y y^T) g / ||x|| per row
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _record(y, (x,), bw, "l2_normalize_rows")


def _as_index(ids, n: int | None = None) -> np.ndarray:
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if n is not None and idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx[(idx < 0) | (idx >= n)][0])
        raise IndexError(f"index {bad} out of range for {n} rows")
    return idx


def segment_sum(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets.

    Accumulation runs in ascending row order (``np.add.at`` is unbuffered and
    sequential), so results match a scalar loop bit for bit.
    """
    ids = _as_index(segment_ids, num_segments)
    if ids.size != values.rows:
        raise ShapeError(f"segment_sum: {ids.size} ids for {values.rows} rows")
    out = np.zeros((num_segments, values.cols))
    np.add.at(out, ids, values.data)
    return _record(out, (values,), lambda g: (g[ids],), "segment_sum")


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``; backward scatters with :func:`segment_sum` semantics."""
    idx = _as_index(index, x.rows)
    n, d = x.shape

    def bw(g):
        out = np.zeros((n, d))
        np.add.at(out, idx, g)
        return (out,)

    return _record(x.data[idx], (x,), bw, "gather_rows")


def gather_cols(x: Tensor, index) -> Tensor:
    idx = _as_index(index, x.cols)
    n, d = x.shape

    def bw(g):
        out = np.zeros((n, d))
        np.add.at(out.T, idx, g.T)
        return (out,)

    return _record(x.data[:, idx], (x,), bw, "gather_cols")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat: no inputs")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise ShapeError(f"concat: mismatched shapes {[p.shape for p in parts]} along axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw, "concat")


def neighbor_sum(x: Tensor, adjacency) -> Tensor:
    """``adjacency @ x`` for a scipy CSR matrix with unit entries.

    Equivalent to ``segment_sum(gather_rows(x, src), dst, n)`` when the CSR
    entries of each row keep ascending edge order (as built by
    :func:`mphil.encoder.adjacency`), and much faster.
    """
    if adjacency.shape[1] != x.rows:
        raise ShapeError(f"neighbor_sum: adjacency {adjacency.shape} vs features {x.shape}")
    return _record(np.asarray(adjacency @ x.data), (x,), lambda g: (np.asarray(adjacency.T @ g),), "neighbor_sum")


def reshape(x: Tensor, rows: int, cols: int) -> Tensor:
    """Row-major reshape."""
    if rows * cols != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as ({rows}, {cols})")
    shape = x.shape
    return _record(x.data.reshape(rows, cols).copy(), (x,), lambda g: (g.reshape(shape),), "reshape")


def div_col(x: Tensor, s: Tensor) -> Tensor:
    """Divide row ``i`` of ``x`` by ``s[i, 0]``."""
    if s.cols != 1 or s.rows != x.rows:
        raise ShapeError(f"div_col: divisor must be {x.rows}x1, got {s.shape}")
    X, S = x.data, s.data
    if (S == 0).any():
        raise DomainError(f"div_col: zero divisor in row {int(np.argmax(S == 0))}")
    y = X / S
    return _record(y, (x, s), lambda g: (g / S, -(g * y).sum(axis=1, keepdims=True) / S), "div_col")


def reduce(kind: str, x: Tensor, axis: int | None = None) -> Tensor:
    """Reduce over ``axis`` (0 -> 1 x cols, 1 -> rows x 1, None -> 1 x 1)."""
    if axis not in (0, 1, None):
        raise ValueError(f"reduce: invalid axis {axis!r}")
    X = x.data
    count = X.size if axis is None else X.shape[axis]
    if count == 0:
        raise ShapeError(f"reduce: empty axis {axis} for shape {x.shape}")
    shape = X.shape
    if kind == "sum" or kind == "mean":
        y = seq_sum(X, axis=axis, keepdims=True)
        f = 1.0 / count if kind == "mean" else 1.0
        if f != 1.0:
            y = y * f
        return _record(y, (x,), lambda g: (np.broadcast_to(g * f, shape).copy(),), kind)
    if kind == "max_over_axis":
        if axis is None:
            flat = int(np.argmax(X))  # first occurrence on ties
            y = np.array([[X.flat[flat]]])

            def bw(g):
                out = np.zeros(shape)
                out.flat[flat] = g[0, 0]
                return (out,)

        else:
            am = np.argmax(X, axis=axis)
            y = np.expand_dims(np.take_along_axis(X, np.expand_dims(am, axis), axis=axis).squeeze(axis), axis)

            def bw(g):
                out = np.zeros(shape)
                np.put_along_axis(out, np.expand_dims(am, axis), g, axis=axis)
                return (out,)

        return _record(y, (x,), bw, "max_over_axis")
    raise ValueError(f"unknown reduction {kind!r}; expected one of {REDUCE_KINDS}")


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def numeric_grad(f: Callable[[], float], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. entries of ``x`` (in place perturbation)."""
    g = np.zeros_like(x.data)
    it = np.nditer(x.data, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x.data[i]
        x.data[i] = orig + step
        fp = f()
        x.data[i] = orig - step
        fm = f()
        x.data[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(1, max |b|) style relative error used by gradient checks."""
    denom = max(1e-8, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]


__all__ = [
    "Tensor", "Tape", "backward", "matmul", "transpose", "add", "sub", "mul", "div", "scale",
    "add_const", "scale_by", "add_row", "add_col", "mul_col", "apply_unary", "sigmoid", "relu",
    "exp", "log", "clamp_min", "softmax_rows", "l2_normalize_rows", "segment_sum", "gather_rows",
    "gather_cols", "concat", "reduce", "neighbor_sum", "reshape", "div_col", "constant", "parameter", "numeric_grad", "rel_error",
    "TensorError", "ShapeError", "DomainError", "DegenerateRowError", "NonFiniteError", "EPS_NORM",
]
