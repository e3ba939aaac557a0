"""
Reverse-mode differentiation over dense float64 matrices.

A Tape records primitive applications in insertion order; backward replays
them in exact reverse order and accumulates vector-Jacobian products into the
`grad` of every Value that requires gradients. Gradients accumulate across
backward calls until `Tape.zero_grad()`.

This module also provides the Adam optimizer and a central-difference
gradient checker.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from stsparse.errors import ContractError, DegenerateMaskError, DimensionError
from stsparse.models.graph import CsrMatrix

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Value:
    """A matrix recorded on a tape, with its gradient once backward has run."""

    __slots__ = ("data", "grad", "node_id", "requires_grad", "tape", "is_leaf")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int, requires_grad: bool, is_leaf: bool):
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.tape = tape
        self.is_leaf = is_leaf

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Value(node={self.node_id}, shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    value: Value
    parents: Tuple[Value, ...]
    backward_fn: Optional[BackwardFn]


class Tape:
    """Append-only record of primitive applications for one forward pass."""

    def __init__(self):
        self._nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(
        self,
        data: np.ndarray,
        parents: Tuple[Value, ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        requires_grad: Optional[bool] = None,
    ) -> Value:
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        value = Value(
            data=data,
            tape=self,
            node_id=len(self._nodes),
            requires_grad=requires_grad,
            is_leaf=not parents,
        )
        self._nodes.append(_Node(value, parents, backward_fn))
        return value

    def parameter(self, data: np.ndarray) -> Value:
        """Record a trainable leaf. The array is shared, so optimizer steps update it in place."""
        if not isinstance(data, np.ndarray) or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        return self._record(data, requires_grad=True)

    def constant(self, data: np.ndarray) -> Value:
        return self._record(np.asarray(data, dtype=np.float64), requires_grad=False)

    def values(self) -> List[Value]:
        return [node.value for node in self._nodes]

    def zero_grad(self):
        for node in self._nodes:
            node.value.grad = None

    def backward(self, loss: Value):
        """
        Accumulate d(loss)/d(value) into every reachable Value that requires gradients.

        Values that require gradients but are unreachable from the loss end
        up with an all-zero gradient.
        """
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if loss.data.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")

        pending = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self._nodes[: loss.node_id + 1]):
            value = node.value
            upstream = pending.pop(value.node_id, None)
            if upstream is None or not value.requires_grad:
                continue
            if value.grad is None:
                value.grad = np.array(upstream, dtype=np.float64, copy=True)
            else:
                value.grad = value.grad + upstream
            if node.backward_fn is None:
                continue
            for parent, parent_grad in zip(node.parents, node.backward_fn(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                existing = pending.get(parent.node_id)
                pending[parent.node_id] = parent_grad if existing is None else existing + parent_grad

        for node in self._nodes:
            if node.value.requires_grad and node.value.grad is None:
                node.value.grad = np.zeros_like(node.value.data)


def _tape_of(*values: Value) -> Tape:
    tape = values[0].tape
    for other in values[1:]:
        if other.tape is not tape:
            raise ContractError("operands were recorded on different tapes")
    return tape


def _require_matrix(value: Value, name: str):
    if value.data.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {value.shape}")


def matmul(a: Value, b: Value) -> Value:
    _require_matrix(a, "matmul lhs")
    _require_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    tape = _tape_of(a, b)
    a_data, b_data = a.data, b.data

    def backward(g):
        grad_a = g @ b_data.T if a.requires_grad else None
        grad_b = a_data.T @ g if b.requires_grad else None
        return grad_a, grad_b

    return tape._record(a_data @ b_data, (a, b), backward)


def spmm(s: CsrMatrix, b: Value) -> Value:
    """Sparse constant times dense Value; the gradient S^T g flows into b only."""
    _require_matrix(b, "spmm rhs")
    if s.n_cols != b.shape[0]:
        raise DimensionError(f"spmm shape mismatch {s.shape} @ {b.shape}")
    tape = b.tape

    def backward(g):
        return (np.asarray(s.as_scipy(transposed=True) @ g),)

    out = np.asarray(s.as_scipy() @ b.data)
    return tape._record(out, (b,), backward)


def hadamard(a: Value, mask: np.ndarray) -> Value:
    """
    Elementwise product with a constant mask.

    The mask has the shape of `a` or is a vector over its columns, in which
    case the same row is applied to every node. No gradient reaches the mask.
    """
    _require_matrix(a, "hadamard operand")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape and mask.shape != (a.shape[1],):
        raise DimensionError(f"mask shape {mask.shape} does not fit operand {a.shape}")

    def backward(g):
        return (g * mask,)

    return a.tape._record(a.data * mask, (a,), backward)


def relu(a: Value) -> Value:
    """ReLU; the subgradient at 0 is 0."""
    active = a.data > 0

    def backward(g):
        return (np.where(active, g, 0.0),)

    return a.tape._record(np.where(active, a.data, 0.0), (a,), backward)


def masked_select(a: Value, keep: np.ndarray) -> Value:
    """Keep entries where `keep` is True and zero the rest; gradient passes only through kept entries."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise DimensionError(f"keep mask shape {keep.shape} does not match {a.shape}")

    def backward(g):
        return (np.where(keep, g, 0.0),)

    return a.tape._record(np.where(keep, a.data, 0.0), (a,), backward)


def dropout(a: Value, p: float, rng: Optional[np.random.Generator], training: bool) -> Value:
    """
    Inverted dropout.

    In eval mode, or with p = 0, the input Value itself is returned.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    scale = 1.0 / (1.0 - p)
    factor = (rng.random(a.shape) >= p) * scale

    def backward(g):
        return (g * factor,)

    return a.tape._record(a.data * factor, (a,), backward)


def add(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch {a.shape} + {b.shape}")
    tape = _tape_of(a, b)
    return tape._record(a.data + b.data, (a, b), lambda g: (g, g))


def sum_all(a: Value) -> Value:
    shape = a.shape

    def backward(g):
        return (np.full(shape, float(g)),)

    return a.tape._record(np.asarray(a.data.sum()), (a,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Value, labels: np.ndarray, mask: np.ndarray) -> Value:
    """
    Mean negative log-likelihood over the masked nodes.

    Uses the log-sum-exp shift, so large logits do not overflow.
    """
    _require_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n = logits.shape[0]
    if labels.shape != (n,) or mask.shape != (n,):
        raise DimensionError("labels and mask must have one entry per logits row")
    selected = np.flatnonzero(mask)
    if selected.size == 0:
        raise DegenerateMaskError("softmax_cross_entropy mask selects no nodes")

    z = logits.data[selected]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(selected.size), labels[selected]]
    loss = np.asarray(np.mean(log_norm - picked))

    def backward(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[np.arange(selected.size), labels[selected]] -= 1.0
        grad = np.zeros_like(logits.data)
        grad[selected] = probs * (float(g) / selected.size)
        return (grad,)

    return logits.tape._record(loss, (logits,), backward)


def propagate(op: Union[CsrMatrix, np.ndarray, Value], h: Value) -> Value:
    """
    Apply a propagation operator to node representations.

    A CsrMatrix goes through spmm, a plain array is a non-differentiable dense
    constant, and a Value receives gradients.
    """
    if isinstance(op, CsrMatrix):
        return spmm(op, h)
    if isinstance(op, Value):
        return matmul(op, h)
    return matmul(h.tape.constant(op), h)


def sym_normalize(a: Value) -> Value:
    """
    Dense D^-1/2 (A + I) D^-1/2 with the gradient taken through the degrees.

    Entries of A are expected to be non-negative, so every degree is at least 1.
    """
    _require_matrix(a, "sym_normalize operand")
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError("sym_normalize needs a square matrix")
    tilde = a.data + np.eye(n)
    degrees = tilde.sum(axis=1)
    if np.any(degrees <= 0):
        raise ContractError("sym_normalize needs positive degrees")
    r = 1.0 / np.sqrt(degrees)
    out = tilde * r[:, None] * r[None, :]

    def backward(g):
        gp = g * out
        grad_degree = -(gp.sum(axis=1) + gp.sum(axis=0)) / (2.0 * degrees)
        return (g * (r[:, None] * r[None, :]) + grad_degree[:, None],)

    return a.tape._record(out, (a,), backward)


def pair_perturb(s: Value, adj_dense: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> Value:
    """
    Relaxed flip of node pairs: A' = A + (1 - 2A) * sym(s) on the listed pairs.

    s[k] in [0, 1] is the flip indicator of pair (rows[k], cols[k]); rows and
    cols never coincide.
    """
    if s.data.ndim != 1 or s.shape[0] != len(rows) or len(rows) != len(cols):
        raise DimensionError("perturbation vector must match the candidate pair list")
    direction = 1.0 - 2.0 * adj_dense[rows, cols]
    delta = direction * s.data
    out = np.array(adj_dense, dtype=np.float64, copy=True)
    out[rows, cols] += delta
    out[cols, rows] += delta

    def backward(g):
        return (direction * (g[rows, cols] + g[cols, rows]),)

    return s.tape._record(out, (s,), backward)


@dataclass
class AdamState:
    """Adam moments for one parameter; weight_decay adds an L2 term to the gradient."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(cls, data: np.ndarray, lr: float = 0.01, weight_decay: float = 0.0) -> "AdamState":
        return cls(
            m=np.zeros_like(data, dtype=np.float64),
            v=np.zeros_like(data, dtype=np.float64),
            lr=lr,
            weight_decay=weight_decay,
        )


def adam_step(param: Value, state: AdamState) -> Tuple[Value, AdamState]:
    """One bias-corrected Adam update, applied in place to param.data."""
    if param.grad is None:
        raise ContractError("adam_step needs a populated gradient; run backward first")
    if state.m.shape != param.shape:
        raise DimensionError("optimizer state does not match the parameter shape")

    g = param.grad
    if state.weight_decay:
        g = g + state.weight_decay * param.data
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)

    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param, state


@dataclass
class GradCheckReport:
    """Outcome of comparing backward gradients against central differences."""

    max_rel_error: float
    passed: bool
    h: float
    tol: float
    per_param: List[float] = field(default_factory=list)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def grad_check(
    f: Callable[[Tape, Sequence[Value]], Value],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """
    Compare backward gradients of f with central finite differences.

    f receives a fresh tape and one parameter Value per array in `params` and
    must return a scalar loss. The arrays themselves are never modified.
    """
    if not 0.0 < h <= 1e-3:
        raise ContractError(f"finite-difference step must lie in (0, 1e-3], got {h}")

    points = [np.array(p, dtype=np.float64, copy=True) for p in params]

    tape = Tape()
    values = [tape.parameter(p.copy()) for p in points]
    tape.backward(f(tape, values))
    analytic = [v.grad for v in values]

    def evaluate(arrays: Sequence[np.ndarray]) -> float:
        probe = Tape()
        return float(f(probe, [probe.parameter(a) for a in arrays]).data)

    per_param = []
    for index, point in enumerate(points):
        numeric = np.zeros_like(point)
        for pos in np.ndindex(point.shape):
            original = point[pos]
            point[pos] = original + h
            upper = evaluate([p.copy() for p in points])
            point[pos] = original - h
            lower = evaluate([p.copy() for p in points])
            point[pos] = original
            numeric[pos] = (upper - lower) / (2.0 * h)
        per_param.append(_relative_error(analytic[index], numeric))

    worst = max(per_param) if per_param else 0.0
    report = GradCheckReport(
        max_rel_error=worst, passed=worst < tol, h=h, tol=tol, per_param=per_param
    )
    logging.debug(f"grad_check: max relative error {worst:.3e} (tol {tol:.1e})")
    return report
