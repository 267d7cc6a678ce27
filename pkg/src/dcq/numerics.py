"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: two-dimensional matrices, the handful of operations an
MLP plus margin-softmax pipeline needs, and a central finite-difference
checker that serves as the gradient oracle everywhere.

Ops take an optional ``tape``. With ``tape=None`` they run in pure
inference mode and the result is a constant: nothing is recorded, so no
gradient can ever reach it. That is how "detached" values (generated class
weights, queue contents) are realized structurally rather than by flags.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_uid_counter = itertools.count()


class Tensor:
    """A dense, row-major float64 array with an identity for gradient bookkeeping.

    ``requires_grad=True`` marks a leaf parameter. Everything else only
    receives gradients if it was produced by an op recorded on a tape.
    """

    __slots__ = ("data", "requires_grad", "uid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keep 0-d scalars 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same storage that no gradient can reach."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{grad})"


class Tape:
    """Ordered record of differentiable ops, replayed backward in reverse.

    A single tape records one forward pass; ``backward`` seeds the scalar
    loss with gradient 1 and accumulates vector-Jacobian products into a
    per-tensor gradient table. Tensors never recorded on the tape (constants,
    detached values) report an exactly-zero gradient.
    """

    def __init__(self):
        self._nodes: list[tuple[int, list[tuple[Tensor, Callable]]]] = []
        self._on_tape: set[int] = set()
        self._grads: dict[int, np.ndarray] | None = None

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t.uid in self._on_tape

    def _record(self, out: Tensor, parents: list[tuple[Tensor, Callable]]) -> None:
        if not parents:
            return
        self._nodes.append((out.uid, parents))
        self._on_tape.add(out.uid)

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of ``loss`` w.r.t. every tracked tensor."""
        if loss.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=np.float64)}
        for out_uid, parents in reversed(self._nodes):
            g_out = grads.get(out_uid)
            if g_out is None:
                continue  # branch not on the path to the loss
            for tensor, vjp in parents:
                contrib = vjp(g_out)
                acc = grads.get(tensor.uid)
                grads[tensor.uid] = contrib if acc is None else acc + contrib
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward pass; exact zeros for untracked tensors."""
        if self._grads is None:
            raise ContractError("grad() before backward()")
        g = self._grads.get(t.uid)
        return np.zeros_like(t.data) if g is None else g


def _register(tape: Tape | None, out: Tensor, candidates) -> None:
    if tape is None:
        return
    parents = [(t, fn) for t, fn in candidates if tape.tracks(t)]
    tape._record(out, parents)


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Matrix product (m×k)·(k×n). Backward: dA = dC·Bᵀ, dB = Aᵀ·dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    _register(tape, out, [
        (a, lambda g, bd=b.data: g @ bd.T),
        (b, lambda g, ad=a.data: ad.T @ g),
    ])
    return out


def add_rowvec(x: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Add a length-D vector to every row of a B×D matrix."""
    if x.data.ndim != 2 or b.data.shape != (x.shape[1],):
        raise ShapeError(f"add_rowvec: {x.shape} + {b.shape}")
    out = Tensor(x.data + b.data)
    _register(tape, out, [
        (x, lambda g: g),
        (b, lambda g: g.sum(axis=0)),
    ])
    return out


def prelu(x: Tensor, slope: Tensor, tape: Tape | None = None) -> Tensor:
    """y = x where x ≥ 0 else slope·x, with a learnable scalar slope."""
    if slope.data.ndim != 0:
        raise ShapeError(f"prelu slope must be a scalar, got shape {slope.shape}")
    a = float(slope.data)
    neg = x.data < 0
    out = Tensor(np.where(neg, a * x.data, x.data))
    _register(tape, out, [
        (x, lambda g, neg=neg: np.where(neg, a * g, g)),
        (slope, lambda g, neg=neg, xd=x.data: np.asarray(np.sum(xd * g, where=neg))),
    ])
    return out


def l2_normalize_rows(x: Tensor, eps: float = 1e-12, tape: Tape | None = None) -> Tensor:
    """Divide each row by max(‖row‖₂, eps); eps guards the zero row."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects B×D, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = x.data / denom
    out = Tensor(y)

    def vjp(g, y=y, denom=denom, clamped=(norms <= eps)):
        # normalization Jacobian (I − yyᵀ)/r per row; clamped rows have a
        # constant denominator, hence no projection term
        rowdot = (g * y).sum(axis=1, keepdims=True)
        rowdot = np.where(clamped, 0.0, rowdot)
        return (g - rowdot * y) / denom

    _register(tape, out, [(x, vjp)])
    return out


def transpose(x: Tensor, tape: Tape | None = None) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    out = Tensor(x.data.T)
    _register(tape, out, [(x, lambda g: np.ascontiguousarray(g.T))])
    return out


def concat_cols(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Concatenate B×kᵢ blocks along columns."""
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    out = Tensor(np.hstack([p.data for p in parts]))
    candidates = []
    offset = 0
    for p in parts:
        sl = slice(offset, offset + p.shape[1])
        candidates.append((p, lambda g, sl=sl: np.ascontiguousarray(g[:, sl])))
        offset += p.shape[1]
    _register(tape, out, candidates)
    return out


def rowwise_dot(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-row inner product of two B×D matrices, returned as B×1."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"rowwise_dot: {a.shape} vs {b.shape}")
    out = Tensor((a.data * b.data).sum(axis=1, keepdims=True))
    _register(tape, out, [
        (a, lambda g, bd=b.data: g * bd),
        (b, lambda g, ad=a.data: g * ad),
    ])
    return out


def affine(x: Tensor, scale: float, shift: float, tape: Tape | None = None) -> Tensor:
    """y = scale·x + shift with constant scale and shift."""
    out = Tensor(scale * x.data + shift)
    _register(tape, out, [(x, lambda g: scale * g)])
    return out


def masked_fill(x: Tensor, mask: np.ndarray, value: float, tape: Tape | None = None) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; they get zero gradient."""
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs tensor {x.shape}")
    out = Tensor(np.where(mask, value, x.data))
    _register(tape, out, [(x, lambda g, mask=mask: np.where(mask, 0.0, g))])
    return out


def subtract_at(x: Tensor, cols: np.ndarray, value: float, tape: Tape | None = None) -> Tensor:
    """Subtract ``value`` at one column per row (the margin position)."""
    if x.data.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError(f"subtract_at: tensor {x.shape}, cols {cols.shape}")
    data = x.data.copy()
    data[np.arange(x.shape[0]), cols] -= value
    out = Tensor(data)
    _register(tape, out, [(x, lambda g: g)])
    return out


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum()))
    _register(tape, out, [(x, lambda g, shape=x.data.shape: np.full(shape, float(g)))])
    return out


@dataclass
class LossDiagnostics:
    """Softmax probabilities split into the ground-truth entry and the rest.

    p_pos[i] is the probability of row i's target class; p_neg[i] holds the
    remaining C−1 probabilities in original column order with the target
    column removed. p_pos + p_neg.sum(axis=1) == 1 per row.
    """

    p_pos: np.ndarray
    p_neg: np.ndarray
    loss: float


def softmax_cross_entropy(
    logits: Tensor, targets: np.ndarray, tape: Tape | None = None
) -> tuple[Tensor, LossDiagnostics]:
    """Mean cross entropy over rows with max-subtracted stable softmax.

    Returns the scalar loss tensor (recorded on the tape) and diagnostics
    with the per-row probabilities. Raises IndexError for targets outside
    [0, C).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects B×C logits, got {logits.shape}")
    n_rows, n_cols = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n_rows,):
        raise ShapeError(f"targets shape {targets.shape} for {n_rows} rows")
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= n_cols:
        raise IndexError(f"target out of range [0, {n_cols})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    z = exps.sum(axis=1, keepdims=True)
    probs = exps / z
    rows = np.arange(n_rows)
    per_row = np.log(z[:, 0]) - shifted[rows, targets]
    loss = Tensor(np.asarray(per_row.mean()))

    def vjp(g, probs=probs, targets=targets):
        d = probs.copy()
        d[rows, targets] -= 1.0
        return d * (float(g) / n_rows)

    _register(tape, loss, [(logits, vjp)])

    keep = np.ones((n_rows, n_cols), dtype=bool)
    keep[rows, targets] = False
    diag = LossDiagnostics(
        p_pos=probs[rows, targets].copy(),
        p_neg=probs[keep].reshape(n_rows, n_cols - 1),
        loss=float(loss.data),
    )
    return loss, diag


def finite_difference_check(
    fn: Callable[[Tape | None], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from the current contents of
    ``params`` each call; it receives a tape (for the analytic pass) or
    None (for the perturbed evaluations). Relative error per coordinate is
    |a − g| / max(|a|, |g|, 1e-8).
    """
    tape = Tape()
    loss = fn(tape)
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss {loss.data!r} in finite_difference_check")
    tape.backward(loss)
    analytic = [tape.grad(p).reshape(-1) for p in params]

    def value() -> float:
        out = fn(None)
        v = float(out.data)
        if not np.isfinite(v):
            raise NumericError("non-finite value during finite differencing")
        return v

    worst = 0.0
    for p, grads in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            f_plus = value()
            flat[i] = saved - h
            f_minus = value()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = grads[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
