"""Minimal dense-tensor math with a define-by-run reverse-mode tape.

Everything is float64. A Tape records nodes in creation order, which is by
construction a topological order, so the backward pass is a single reverse
sweep. Tapes are rebuilt per training step; there is no graph reuse.

Broadcasting is deliberately restricted: `add` accepts equal shapes or a
(batch, n) + (n,) bias add over the leading dimension, and nothing else.
Any other shape mismatch raises ShapeError with both shapes in the message.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array bound to a node on a recording tape."""

    __slots__ = ("data", "tape", "node_id", "grad")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int):
        self.data = data
        self.tape = tape
        self.node_id = node_id
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"


class _Node:
    """One tape record: the producing op and how to push gradients back."""

    __slots__ = ("op", "tensor", "parent_ids", "backward_fn")

    def __init__(self, op, tensor, parent_ids, backward_fn):
        self.op = op
        self.tensor = tensor
        self.parent_ids = parent_ids
        # backward_fn(grad_out) -> list of gradients aligned with parent_ids
        self.backward_fn = backward_fn


class Tape:
    """Ordered op records; node ids grow with creation (inputs precede consumers)."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def leaf(self, data) -> Tensor:
        """Register a parameter or constant; leaves receive gradients in backward()."""
        return self._record("leaf", _as_f64(data), (), None)

    def _record(self, op: str, data: np.ndarray, parents: Sequence[Tensor],
                backward_fn: Callable | None) -> Tensor:
        for p in parents:
            if p.tape is not self:
                raise ValueError(f"op '{op}' mixes tensors from different tapes")
        node_id = len(self._nodes)
        out = Tensor(data, self, node_id)
        self._nodes.append(_Node(op, out, tuple(p.node_id for p in parents), backward_fn))
        return out

    def __len__(self) -> int:
        return len(self._nodes)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.data.shape} @ {b.data.shape}")
    tape = _same_tape(a, b)
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return [g @ b_data.T, a_data.T @ g]

    return tape._record("matmul", out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.data.shape == b.data.shape:
        def backward_fn(g):
            return [g, g]
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        # bias add over the leading batch dimension, the only broadcast allowed
        def backward_fn(g):
            return [g, g.sum(axis=0)]
    else:
        raise ShapeError(f"add shapes do not conform: {a.data.shape} + {b.data.shape}")
    return tape._record("add", a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"elementwise-mul shapes differ: {a.data.shape} vs {b.data.shape}")
    tape = _same_tape(a, b)
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return [g * b_data, g * a_data]

    return tape._record("elementwise-mul", a.data * b.data, (a, b), backward_fn)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward_fn(g):
        return [g * (1.0 - y * y)]

    return x.tape._record("tanh", y, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    # stable split form avoids overflow in exp for large |x|
    y = np.where(x.data >= 0,
                 1.0 / (1.0 + np.exp(-np.clip(x.data, 0, None))),
                 np.exp(np.clip(x.data, None, 0)) / (1.0 + np.exp(np.clip(x.data, None, 0))))

    def backward_fn(g):
        return [g * y * (1.0 - y)]

    return x.tape._record("sigmoid", y, (x,), backward_fn)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward_fn(g):
        return [g * y]

    return x.tape._record("exp", y, (x,), backward_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    if table.data.ndim != 2:
        raise ShapeError(f"embedding-lookup table must be 2-D, got {table.data.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"embedding-lookup ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding-lookup id out of range for table {table.data.shape}")
    rows = table.data[idx]
    n_rows = table.data.shape[0]

    def backward_fn(g):
        gt = np.zeros((n_rows, table.data.shape[1]))
        np.add.at(gt, idx, g)
        return [gt]

    return table.tape._record("embedding-lookup", rows, (table,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    tape = _same_tape(*tensors)
    ndim = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != ndim:
            raise ShapeError(f"concat rank mismatch: {[x.data.shape for x in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return list(np.split(g, splits, axis=axis))

    return tape._record("concat", out, tuple(tensors), backward_fn)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, computed with max-subtraction."""
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"log-softmax expects 1-D or 2-D input, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    sm = np.exp(y)

    def backward_fn(g):
        return [g - sm * g.sum(axis=-1, keepdims=True)]

    return x.tape._record("log-softmax", y, (x,), backward_fn)


def gather(x: Tensor, cols) -> Tensor:
    """Pick x[i, cols[i]] for each row i of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather expects a 2-D input, got {x.data.shape}")
    idx = np.asarray(cols, dtype=np.intp)
    if idx.ndim != 1 or idx.size != x.data.shape[0]:
        raise ShapeError(f"gather needs one column per row: {x.data.shape} vs {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[1]):
        raise ShapeError(f"gather column out of range for {x.data.shape}")
    rows = np.arange(idx.size)
    out = x.data[rows, idx]
    shape = x.data.shape

    def backward_fn(g):
        gx = np.zeros(shape)
        gx[rows, idx] = g
        return [gx]

    return x.tape._record("gather", out, (x,), backward_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[1]):
        raise ShapeError(f"slice-cols [{start}:{stop}] invalid for {x.data.shape}")
    out = x.data[:, start:stop].copy()
    shape = x.data.shape

    def backward_fn(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return [gx]

    return x.tape._record("slice-cols", out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape

    def backward_fn(g):
        return [np.full(shape, float(g))]

    return x.tape._record("sum", np.asarray(x.data.sum()), (x,), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        return [g * c]

    return x.tape._record("scale", x.data * c, (x,), backward_fn)


_FORWARD_KINDS = {
    "matmul": lambda a, b: matmul(a, b),
    "add": lambda a, b: add(a, b),
    "elementwise-mul": lambda a, b: mul(a, b),
    "tanh": lambda x: tanh(x),
    "sigmoid": lambda x: sigmoid(x),
    "embedding-lookup": lambda table, ids: embedding_lookup(table, ids),
    "concat": lambda *ts: concat(ts),
    "log-softmax": lambda x: log_softmax(x),
    "gather": lambda x, cols: gather(x, cols),
}


def forward(kind: str, *inputs) -> Tensor:
    """Dispatch one forward op by name; see _FORWARD_KINDS for the set."""
    if kind not in _FORWARD_KINDS:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_FORWARD_KINDS)}")
    return _FORWARD_KINDS[kind](*inputs)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every tensor of the tape reachable from `loss`.

    Unreachable tensors (including leaves the loss does not depend on) get
    exact-zero gradients. The sweep visits nodes in strict reverse creation
    order exactly once, so results are bit-deterministic.
    """
    if loss.tape is not tape:
        raise ValueError("loss does not belong to this tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads = [np.zeros(n.tensor.data.shape) for n in tape._nodes]
    grads[loss.node_id] = np.ones(loss.data.shape)
    for node in reversed(tape._nodes):
        g = grads[node.tensor.node_id]
        node.tensor.grad = g
        if node.backward_fn is None:
            continue
        for pid, pg in zip(node.parent_ids, node.backward_fn(g)):
            grads[pid] = grads[pid] + pg


class GradientCheckError(NumericError):
    """The checked function produced a non-finite value.

    Carries the parameter index and flat coordinate being perturbed when the
    failure occurred (both None if the unperturbed evaluation failed).
    """

    def __init__(self, message, param_index=None, coord=None):
        super().__init__(message)
        self.param_index = param_index
        self.coord = coord


def finite_diff_check(fn: Callable[[list[Tensor]], Tensor],
                      params: Sequence[np.ndarray],
                      epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of `fn` against central differences.

    `fn` receives freshly created leaves on a new tape and must return a
    scalar Tensor. Returns the max over all coordinates of
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = [_as_f64(p) for p in params]

    def evaluate(arrays, want_grads=False):
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrays]
        out = fn(leaves)
        value = float(out.data)
        if not want_grads:
            return value, None
        backward(tape, out)
        return value, [leaf.grad.copy() for leaf in leaves]

    base_value, analytic = evaluate(params, want_grads=True)
    if not np.isfinite(base_value):
        raise GradientCheckError("non-finite loss at the unperturbed point")

    max_rel = 0.0
    for pi, base in enumerate(params):
        flat = base.ravel()
        a_flat = analytic[pi].ravel()
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + epsilon
            up, _ = evaluate(params)
            flat[ci] = orig - epsilon
            down, _ = evaluate(params)
            flat[ci] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradientCheckError(
                    f"non-finite loss while perturbing param {pi} coord {ci}",
                    param_index=pi, coord=ci)
            numeric = (up - down) / (2.0 * epsilon)
            a = a_flat[ci]
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            if rel > max_rel:
                max_rel = rel
    return max_rel
