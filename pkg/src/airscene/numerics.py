"""Reverse-mode autodiff over dense float64 arrays.

A small tape engine: every operation wraps its numpy result in a :class:`Var`
that remembers its inputs and a backward closure, and ``backward()`` walks the
recorded graph exactly once in reverse topological order.  All values are
float64 and C-contiguous; a non-finite result raises immediately instead of
letting NaNs travel through the model.

The engine is deliberately small: just the operations the trajectory model
needs (matrix products, masked row softmax, layer norm, GELU, masked MSE and
a few row/column shuffles), each with a hand-written derivative that is
verified against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

# Additive mask constant.  exp(MASK_NEG + s - rowmax) underflows to exactly
# 0.0 for any finite score s, so masked entries contribute nothing, bit for bit.
MASK_NEG = -1e30


class NumericsError(ValueError):
    """Base class for tensor arithmetic errors."""


class ShapeMismatchError(NumericsError):
    """Operand shapes are incompatible."""


class NonFiniteError(NumericsError):
    """An operation produced NaN or Inf."""


class MaskError(NumericsError):
    """A masked reduction was left with zero allowed entries."""


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a C-contiguous float64 array, rejecting non-finite input."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    require_finite(arr, "tensor")
    return arr


def require_finite(arr: np.ndarray, where: str) -> None:
    # One-pass probe first (any NaN/Inf makes the sum non-finite); the exact
    # per-entry check only runs when the probe trips, so the hot path stays cheap.
    with np.errstate(over="ignore", invalid="ignore"):
        probe = float(np.sum(arr))
    if not math.isfinite(probe) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Var:
    """A node in the computation record: a value plus a lazy gradient.

    Leaves are created through :func:`param` (gradient-tracked) or
    :func:`const`.  Operation results hold references to their parents, so
    each forward pass builds a fresh acyclic record that is dropped once the
    outputs go out of scope.
    """

    __slots__ = ("value", "grad", "track", "_parents", "_backward")

    def __init__(
        self,
        value,
        parents: tuple["Var", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        track: bool | None = None,
    ):
        self.value = value if isinstance(value, np.ndarray) else tensor(value)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        if track is None:
            track = any(p.track for p in parents) if parents else True
        self.track = track
        if parents:
            require_finite(self.value, "operation result")
            # Results are immutable values; only leaf parameters may be
            # updated (by the optimizer, between passes).
            self.value.flags.writeable = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeMismatchError(f"item() on non-scalar shape {self.shape}")
        return float(self.value.reshape(()))

    def add_grad(self, g: np.ndarray) -> None:
        if not self.track:
            return
        if g.shape != self.value.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} != value shape {self.value.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every tracked leaf's ``grad``.

        ``self`` must be scalar.  Each node in the record is visited exactly
        once, in reverse topological order.
        """
        if self.value.size != 1:
            raise ShapeMismatchError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.value)
        for node in order:
            if node._backward is not None and node.grad is not None and node.track:
                node._backward(node.grad)

    # Sugar used by the model code.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        kind = "leaf" if not self._parents else "op"
        return f"Var(shape={self.shape}, {kind}, track={self.track})"


def param(data) -> Var:
    """A gradient-tracked leaf (model parameter)."""
    return Var(tensor(data), track=True)


def const(data) -> Var:
    """An untracked leaf (inputs, targets, masks, fixed projections)."""
    return Var(tensor(data), track=False)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else const(x)


def _toposort(root: Var) -> list[Var]:
    """Reverse topological order, iterative so deep tapes never recurse out."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def zero_grads(params: Iterable[Var]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out_val = a.value + b.value

    def bw(g):
        a.add_grad(_unbroadcast(g, a.value.shape))
        b.add_grad(_unbroadcast(g, b.value.shape))

    return Var(out_val, (a, b), bw)


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out_val = a.value - b.value

    def bw(g):
        a.add_grad(_unbroadcast(g, a.value.shape))
        b.add_grad(_unbroadcast(-g, b.value.shape))

    return Var(out_val, (a, b), bw)


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out_val = a.value * b.value

    def bw(g):
        a.add_grad(_unbroadcast(g * b.value, a.value.shape))
        b.add_grad(_unbroadcast(g * a.value, b.value.shape))

    return Var(out_val, (a, b), bw)


def matmul(a, b) -> Var:
    """Matrix product of 2-D operands, differentiable w.r.t. both."""
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatchError(
            f"matmul expects 2-D operands, got {a.value.shape} and {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.value.shape} x {b.value.shape}"
        )
    out_val = a.value @ b.value

    def bw(g):
        a.add_grad(g @ b.value.T)
        b.add_grad(a.value.T @ g)

    return Var(out_val, (a, b), bw)


def transpose(a) -> Var:
    a = _lift(a)
    if a.value.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a 2-D operand, got {a.value.shape}")
    out_val = np.ascontiguousarray(a.value.T)

    def bw(g):
        a.add_grad(np.ascontiguousarray(g.T))

    return Var(out_val, (a,), bw)


def matmul_t(a, b) -> Var:
    """``a @ b.T`` without materializing the transpose.

    Feeding the transposed view straight to the matrix product keeps the
    result row-stable when rows are appended to either operand, which the
    copy-then-multiply route does not guarantee.
    """
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatchError(
            f"matmul_t expects 2-D operands, got {a.value.shape} and {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[1]:
        raise ShapeMismatchError(
            f"matmul_t contraction widths disagree: {a.value.shape} x {b.value.shape}"
        )
    out_val = a.value @ b.value.T

    def bw(g):
        a.add_grad(g @ b.value)
        b.add_grad(g.T @ a.value)

    return Var(out_val, (a, b), bw)


def ssum(a) -> Var:
    """Sum of all entries, as a scalar."""
    a = _lift(a)
    out_val = np.asarray(np.sum(a.value))

    def bw(g):
        a.add_grad(np.broadcast_to(g, a.value.shape).copy())

    return Var(out_val, (a,), bw)


# ---------------------------------------------------------------------------
# row/column shuffles used to arrange per-aircraft tokens
# ---------------------------------------------------------------------------

def cols(a, start: int, stop: int) -> Var:
    """Contiguous column slice of a 2-D operand."""
    a = _lift(a)
    if a.value.ndim != 2:
        raise ShapeMismatchError(f"cols expects a 2-D operand, got {a.value.shape}")
    out_val = np.ascontiguousarray(a.value[:, start:stop])

    def bw(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        a.add_grad(full)

    return Var(out_val, (a,), bw)


def concat_cols(parts: Sequence) -> Var:
    parts = [_lift(p) for p in parts]
    widths = [p.value.shape[1] for p in parts]
    out_val = np.concatenate([p.value for p in parts], axis=1)

    def bw(g):
        off = 0
        for p, w in zip(parts, widths):
            p.add_grad(np.ascontiguousarray(g[:, off:off + w]))
            off += w

    return Var(out_val, tuple(parts), bw)


def interleave_rows(parts: Sequence) -> Var:
    """Interleave k same-shape (n, d) blocks into (k*n, d), row-major.

    Output row ``i*k + j`` is row ``i`` of block ``j``; used to order variate
    tokens aircraft-major, axis-minor.
    """
    parts = [_lift(p) for p in parts]
    k = len(parts)
    n, d = parts[0].value.shape
    for p in parts:
        if p.value.shape != (n, d):
            raise ShapeMismatchError("interleave_rows requires equal block shapes")
    out_val = np.empty((k * n, d))
    for j, p in enumerate(parts):
        out_val[j::k] = p.value

    def bw(g):
        for j, p in enumerate(parts):
            p.add_grad(np.ascontiguousarray(g[j::k]))

    return Var(out_val, tuple(parts), bw)


def group_mean_rows(a, k: int) -> Var:
    """Mean of each consecutive group of k rows: (k*n, d) -> (n, d)."""
    a = _lift(a)
    rows, d = a.value.shape
    if rows % k != 0:
        raise ShapeMismatchError(f"group_mean_rows: {rows} rows not divisible by {k}")
    out_val = a.value.reshape(rows // k, k, d).mean(axis=1)

    def bw(g):
        a.add_grad(np.repeat(g, k, axis=0) / k)

    return Var(out_val, (a,), bw)


# ---------------------------------------------------------------------------
# nonlinear blocks
# ---------------------------------------------------------------------------

def softmax_rows(x, mask: np.ndarray | None = None) -> Var:
    """Row-wise softmax of a 2-D operand with optional boolean keep-mask.

    Masked entries are pushed to MASK_NEG before the (max-subtracted) exp, so
    they come out exactly 0; they are zeroed again afterwards regardless.
    A row with no allowed entry is an error, never a NaN.
    """
    x = _lift(x)
    if x.value.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows expects 2-D input, got {x.value.shape}")
    logits = x.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape:
            raise ShapeMismatchError(
                f"mask shape {mask.shape} != input shape {logits.shape}"
            )
        bad = ~mask.any(axis=1)
        if bad.any():
            raise MaskError(
                f"softmax_rows: rows {np.flatnonzero(bad).tolist()} have no allowed entries"
            )
        logits = logits + np.where(mask, 0.0, MASK_NEG)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    out_val = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        w = out_val
        dot = np.sum(w * g, axis=1, keepdims=True)
        gx = w * (g - dot)
        if mask is not None:
            gx = np.where(mask, gx, 0.0)
        x.add_grad(gx)

    return Var(out_val, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-8) -> Var:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.value.shape[-1]
    if d < 2:
        raise ShapeMismatchError("layer_norm needs a last axis of size >= 2")
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise ShapeMismatchError(
            f"gain/bias must have shape ({d},), got {gain.value.shape} and {bias.value.shape}"
        )
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_val = gain.value * xhat + bias.value

    def bw(g):
        bias.add_grad(_unbroadcast(g, bias.value.shape))
        gain.add_grad(_unbroadcast(g * xhat, gain.value.shape))
        gh = g * gain.value
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = np.mean(gh * xhat, axis=-1, keepdims=True)
        x.add_grad(inv * (gh - m1 - xhat * m2))

    return Var(out_val, (x, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Var:
    """GELU activation (tanh form), smooth enough for tight gradient checks."""
    x = _lift(x)
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out_val = 0.5 * v * (1.0 + t)

    def bw(g):
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        x.add_grad(g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * dinner))

    return Var(out_val, (x,), bw)


def mse(pred, target, mask: np.ndarray | None = None) -> Var:
    """Mean squared error over mask-allowed entries, as a scalar."""
    pred, target = _lift(pred), _lift(target)
    if pred.value.shape != target.value.shape:
        raise ShapeMismatchError(
            f"mse shapes disagree: {pred.value.shape} vs {target.value.shape}"
        )
    if mask is None:
        mask = np.ones(pred.value.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.value.shape:
            raise ShapeMismatchError(
                f"mse mask shape {mask.shape} != pred shape {pred.value.shape}"
            )
    count = int(mask.sum())
    if count == 0:
        raise MaskError("mse: mask allows zero entries")
    diff = np.where(mask, pred.value - target.value, 0.0)
    out_val = np.asarray(np.sum(diff * diff) / count)

    def bw(g):
        base = (2.0 / count) * diff * g
        pred.add_grad(base)
        target.add_grad(-base)

    return Var(out_val, (pred, target), bw)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Var],
    params: Sequence[Var],
    step: float,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Returns the max over checked coordinates of
    ``|analytic - difference| / max(|analytic|, |difference|, 1e-12)``.
    When ``max_coords`` is given, that many coordinates are sampled uniformly
    across all parameters (without replacement).
    """
    if step <= 0:
        raise ValueError("grad_check step must be > 0")
    zero_grads(params)
    loss = f()
    loss.backward()
    analytic = [
        np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params
    ]
    zero_grads(params)

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    if max_coords is not None and max_coords < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(c)] for c in picked]

    worst = 0.0
    for i, j in coords:
        flat = params[i].value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        hi = f().item()
        flat[j] = orig - step
        lo = f().item()
        flat[j] = orig
        diff = (hi - lo) / (2.0 * step)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - diff) / max(abs(a), abs(diff), 1e-12)
        worst = max(worst, err)
    return worst
