"""Minimal dense float64 tensor engine with reverse-mode autodiff.

Arrays are numpy-backed, row-major and immutable after construction. Every
operation works on plain constants (no tape) or on tensors attached to a
GradTape; mixing tensors from two different tapes is an error. The tape is
a flat record of primitive ops replayed in reverse to accumulate adjoints.

Design notes:
  - float64 everywhere: gradient checks need the precision, speed is a
    non-issue at this scale.
  - masking in masked_softmax_rows is "exclude, then normalize", so
    disallowed entries come out as exact zeros (not tiny exponentials).
  - no broadcasting beyond the few row-vector cases the model needs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "ParameterError",
    "DegenerateRowError",
    "TapeError",
    "gradient",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "mul_row",
    "linear",
    "layer_norm",
    "gelu",
    "rotate_pairs",
    "concat_rows",
    "slice_rows",
    "concat_cols",
    "slice_cols",
    "masked_softmax_rows",
    "tensor_sum",
    "mse",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """A scalar parameter or configuration value is out of its valid range."""


class DegenerateRowError(ValueError):
    """A softmax row has no allowed entries."""


class TapeError(RuntimeError):
    """The tape cannot serve the requested gradient."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


class Tensor:
    """Immutable float64 array, optionally recorded on a GradTape.

    Invariant: product(shape) == data.size (contiguous row-major buffer).
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "GradTape | None" = None, node: int = -1):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        self.data = _freeze(np.array(data, dtype=np.float64))
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag})"


class GradTape:
    """Ordered record of primitive ops, replayed in reverse for adjoints.

    Confined to one generation/training session; not thread-safe. Watched
    tensors are the differentiation inputs: gradient() returns one array
    per watch() call, in order, each input visited exactly once.
    """

    def __init__(self):
        self._entries: list[tuple[int, tuple[int, ...], Callable]] = []
        self._watched: list[Tensor] = []
        self._n_nodes = 0

    def watch(self, data) -> Tensor:
        t = Tensor(data, tape=self, node=self._fresh_node())
        self._watched.append(t)
        return t

    @property
    def watched(self) -> tuple[Tensor, ...]:
        return tuple(self._watched)

    def _fresh_node(self) -> int:
        n = self._n_nodes
        self._n_nodes += 1
        return n

    def _record(self, out_data: np.ndarray, inputs: Sequence[Tensor],
                backward: Callable) -> Tensor:
        node = self._fresh_node()
        in_nodes = tuple(t.node if t.tape is self else -1 for t in inputs)
        self._entries.append((node, in_nodes, backward))
        return Tensor(out_data, tape=self, node=node)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _joint_tape(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeError("operands recorded on different tapes")
    return tape


def _emit(tape: GradTape | None, out: np.ndarray, inputs: Sequence[Tensor],
          backward: Callable) -> Tensor:
    if tape is None:
        return Tensor(out)
    return tape._record(out, inputs, backward)


def gradient(tape: GradTape, loss: Tensor) -> list[np.ndarray]:
    """Adjoints of a scalar loss with respect to every watched input.

    Returns one array per watch() call, in watch order; inputs the loss
    does not depend on get zeros.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise TapeError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for node, in_nodes, backward in reversed(tape._entries):
        g = adjoints.get(node)
        if g is None:
            continue
        for nid, gin in zip(in_nodes, backward(g)):
            if nid < 0 or gin is None:
                continue
            prev = adjoints.get(nid)
            adjoints[nid] = gin if prev is None else prev + gin
    return [np.array(adjoints.get(t.node, np.zeros_like(t.data)))
            for t in tape._watched]


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    """c[i,j] = sum_k a[i,k] * b[k,j]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        return (g @ bd.T, ad.T @ g)

    return _emit(_joint_tape(a, b), out, (a, b), backward)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")
    return _emit(_joint_tape(x), x.data.T, (x,), lambda g: (g.T,))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(_joint_tape(a, b), a.data + b.data, (a, b),
                 lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(_joint_tape(a, b), a.data - b.data, (a, b),
                 lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(_joint_tape(a, b), ad * bd, (a, b),
                 lambda g: (g * bd, g * ad))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _emit(_joint_tape(x), x.data * c, (x,), lambda g: (g * c,))


def _row_vector(r: Tensor, cols: int, op: str) -> np.ndarray:
    rd = r.data.reshape(-1)
    if rd.shape[0] != cols:
        raise ShapeError(f"{op}: row vector length {rd.shape[0]} != {cols} columns")
    return rd


def add_row(x, r) -> Tensor:
    """x[i,:] + r, broadcasting the row vector r over every row."""
    x, r = _as_tensor(x), _as_tensor(r)
    rd = _row_vector(r, x.shape[1], "add_row")
    rshape = r.data.shape
    return _emit(_joint_tape(x, r), x.data + rd[None, :], (x, r),
                 lambda g: (g, g.sum(axis=0).reshape(rshape)))


def mul_row(x, r) -> Tensor:
    """x[i,:] * r, broadcasting the row vector r over every row."""
    x, r = _as_tensor(x), _as_tensor(r)
    rd = _row_vector(r, x.shape[1], "mul_row")
    rshape = r.data.shape
    xd = x.data
    return _emit(_joint_tape(x, r), xd * rd[None, :], (x, r),
                 lambda g: (g * rd[None, :], (g * xd).sum(axis=0).reshape(rshape)))


def linear(x, w, b) -> Tensor:
    """Affine projection y = x @ w + b with b broadcast over rows."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} x {w.shape}")
    bd = _row_vector(b, w.shape[1], "linear")
    bshape = b.data.shape
    xd, wd = x.data, w.data
    out = xd @ wd + bd[None, :]

    def backward(g):
        return (g @ wd.T, xd.T @ g, g.sum(axis=0).reshape(bshape))

    return _emit(_joint_tape(x, w, b), out, (x, w, b), backward)


def layer_norm(x, eps: float = 1e-6) -> Tensor:
    """Per-row normalization to zero mean, unit variance (no affine)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a matrix, got {x.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv

    def backward(g):
        # d/dx of (x-mu)*inv with mu, var functions of the row
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _emit(_joint_tape(x), y, (x,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact Gaussian-error-linear unit, 0.5*x*(1 + erf(x/sqrt(2)))."""
    x = _as_tensor(x)
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (phi + xd * pdf),)

    return _emit(_joint_tape(x), out, (x,), backward)


def rotate_pairs(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved channel pairs (2k, 2k+1) by per-entry angles.

    cos/sin are constant tables of shape [rows, cols/2]; each pair is an
    orthonormal 2-D rotation, so row norms are preserved.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] % 2 != 0:
        raise ShapeError(f"rotate_pairs needs an even column count, got {x.shape}")
    rows, cols = x.shape
    if cos.shape != (rows, cols // 2) or sin.shape != (rows, cols // 2):
        raise ShapeError(
            f"rotate_pairs table shape {cos.shape} does not match {(rows, cols // 2)}")
    xe, xo = x.data[:, 0::2], x.data[:, 1::2]
    out = np.empty_like(x.data)
    out[:, 0::2] = xe * cos - xo * sin
    out[:, 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[:, 0::2], g[:, 1::2]
        gx = np.empty_like(g)
        gx[:, 0::2] = ge * cos + go * sin
        gx[:, 1::2] = -ge * sin + go * cos
        return (gx,)

    return _emit(_joint_tape(x), out, (x,), backward)


def concat_rows(parts: Sequence) -> Tensor:
    """Concatenate matrices along the token (row) axis."""
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ShapeError("concat_rows of nothing")
    cols = ts[0].shape[1]
    for t in ts:
        if t.data.ndim != 2 or t.shape[1] != cols:
            raise ShapeError(f"concat_rows width mismatch: {t.shape} vs {cols} columns")
    sizes = [t.shape[0] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=0)
    return _emit(_joint_tape(*ts), out, ts,
                 lambda g: tuple(np.split(g, splits, axis=0)))


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    rows = x.shape[0]
    if not (0 <= start <= stop <= rows):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {rows} rows")
    shape = x.data.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[start:stop] = g
        return (gx,)

    return _emit(_joint_tape(x), x.data[start:stop].copy(), (x,), backward)


def concat_cols(parts: Sequence) -> Tensor:
    """Concatenate matrices along the channel (column) axis."""
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ShapeError("concat_cols of nothing")
    rows = ts[0].shape[0]
    for t in ts:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise ShapeError(f"concat_cols height mismatch: {t.shape} vs {rows} rows")
    widths = [t.shape[1] for t in ts]
    splits = np.cumsum(widths)[:-1]
    out = np.concatenate([t.data for t in ts], axis=1)
    return _emit(_joint_tape(*ts), out, ts,
                 lambda g: tuple(np.split(g, splits, axis=1)))


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    cols = x.shape[1]
    if not (0 <= start <= stop <= cols):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {cols} columns")
    shape = x.data.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return _emit(_joint_tape(x), x.data[:, start:stop].copy(), (x,), backward)


def masked_softmax_rows(logits, allow: np.ndarray) -> Tensor:
    """Row-wise softmax over the allowed entries only.

    Disallowed entries are exact zeros in the output; each row normalizes
    over its allowed logits. A row with no allowed entry is an error.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"masked_softmax_rows needs a matrix, got {logits.shape}")
    allow = np.asarray(allow, dtype=bool)
    if allow.shape != logits.shape:
        raise ShapeError(
            f"mask shape {allow.shape} does not match logits {logits.shape}")
    row_ok = allow.any(axis=1)
    if not row_ok.all():
        bad = int(np.argmin(row_ok))
        raise DegenerateRowError(f"row {bad} has no allowed entries")
    ld = logits.data
    row_max = np.where(allow, ld, -np.inf).max(axis=1, keepdims=True)
    e = np.where(allow, np.exp(ld - row_max), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        # restricted softmax jacobian; p is exactly 0 on disallowed entries,
        # so those logits get exactly zero gradient
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _emit(_joint_tape(logits), p, (logits,), backward)


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.data.shape
    return _emit(_joint_tape(x), np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mse(a, b) -> Tensor:
    """Mean squared error over all entries, as a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def backward(g):
        gd = (2.0 / n) * diff * g
        return (gd, -gd)

    return _emit(_joint_tape(a, b), out, (a, b), backward)
