"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every trainable quantity in this package is a :class:`Tensor` wrapping a
numpy float64 array.  Primitives record onto the thread's active
:class:`Tape`; ``Tape.backward`` replays the records in reverse order and
accumulates exact analytic gradients into every input tensor marked
``requires_grad``.  With no active tape the same primitives execute as
plain numpy, which is how inference and finite-difference probes run.

A tape is confined to a single thread.  Accumulation happens in the fixed
order the forward pass executed, so repeated runs of the same computation
produce bit-identical values and gradients.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, GradCheckError

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "mean",
    "concat",
    "relu",
    "sigmoid",
    "l2_norm",
    "cosine_similarity",
    "rowwise_cosine",
    "softmax_cross_entropy",
    "softmax_cross_entropy_batch",
    "gather_rows",
    "scatter_add_rows",
    "combine_bases",
    "batched_vecmat",
    "grad_check",
]


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; everything funnels into the primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_LOCAL = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Ordered record of executed primitives for one forward pass.

    The record list is a topological order by construction (an output exists
    only after its inputs), so the backward pass visits each record exactly
    once, in reverse.  Use as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractViolation("a tape is already active in this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _LOCAL.tape = None

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor, seed: float = 1.0) -> None:
        """Accumulate d(root)/d(input) into every recorded input's ``grad``."""
        if root.data.shape != ():
            raise ContractViolation("backward root must be a scalar tensor")
        if not root.requires_grad:
            raise ContractViolation("backward root does not depend on any tracked tensor")
        root._accumulate(np.asarray(seed, dtype=np.float64))
        for out, vjp in reversed(self._records):
            if out.grad is None:
                continue
            vjp(out.grad)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], vjp_builder) -> Tensor:
    """Create the output tensor, recording a backward closure if needed."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._records.append((out, vjp_builder(out)))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def build(out):
        def vjp(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return vjp

    return _emit(a.data + b.data, (a, b), build)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def build(out):
        def vjp(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(-_unbroadcast(g, b.data.shape))

        return vjp

    return _emit(a.data - b.data, (a, b), build)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def build(out):
        def vjp(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return vjp

    return _emit(a.data * b.data, (a, b), build)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def build(out):
        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * c)

        return vjp

    return _emit(a.data * c, (a,), build)


def matmul(a, b) -> Tensor:
    """Matrix or vector product for operands of rank 1 or 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ContractViolation("matmul supports rank 1 and rank 2 operands only")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}") from exc

    def build(out):
        def vjp(g):
            an, bn = a.data.ndim, b.data.ndim
            if a.requires_grad:
                if an == 2 and bn == 2:
                    a._accumulate(g @ b.data.T)
                elif an == 2 and bn == 1:
                    a._accumulate(np.outer(g, b.data))
                elif an == 1 and bn == 2:
                    a._accumulate(b.data @ g)
                else:
                    a._accumulate(g * b.data)
            if b.requires_grad:
                if an == 2 and bn == 2:
                    b._accumulate(a.data.T @ g)
                elif an == 2 and bn == 1:
                    b._accumulate(a.data.T @ g)
                elif an == 1 and bn == 2:
                    b._accumulate(np.outer(a.data, g))
                else:
                    b._accumulate(g * a.data)

        return vjp

    return _emit(out_data, (a, b), build)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation("transpose expects a rank 2 tensor")

    def build(out):
        def vjp(g):
            if a.requires_grad:
                a._accumulate(g.T)

        return vjp

    return _emit(a.data.T.copy(), (a,), build)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def build(out):
        def vjp(g):
            if a.requires_grad:
                a._accumulate(g.reshape(a.data.shape))

        return vjp

    return _emit(out_data.copy(), (a,), build)


def mean(a, axis: int = 0) -> Tensor:
    """Arithmetic mean along one axis, summed in index order."""
    a = as_tensor(a)
    if a.data.ndim == 0:
        raise ContractViolation("mean expects a tensor of rank 1 or higher")
    n = a.data.shape[axis]
    if n == 0:
        raise ContractViolation("mean over an empty axis")

    def build(out):
        def vjp(g):
            if a.requires_grad:
                expanded = np.expand_dims(g, axis) / n
                a._accumulate(np.broadcast_to(expanded, a.data.shape))

        return vjp

    return _emit(a.data.mean(axis=axis), (a,), build)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractViolation("concat of zero tensors")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def build(out):
        def vjp(g):
            offset = 0
            for t, size in zip(ts, sizes):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(offset, offset + size)
                    t._accumulate(g[tuple(index)])
                offset += size

        return vjp

    return _emit(out_data, ts, build)


# ---------------------------------------------------------------------------
# Nonlinearities and norms


def relu(a) -> Tensor:
    a = as_tensor(a)

    def build(out):
        mask = a.data > 0.0

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * mask)

        return vjp

    return _emit(np.maximum(a.data, 0.0), (a,), build)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def build(out):
        s = out.data

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * s * (1.0 - s))

        return vjp

    return _emit(out_data, (a,), build)


def l2_norm(a) -> Tensor:
    """Euclidean norm of a rank 1 tensor.  Zero input has zero gradient."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ContractViolation("l2_norm expects a rank 1 tensor")
    norm = float(np.linalg.norm(a.data))

    def build(out):
        def vjp(g):
            if a.requires_grad and norm > 0.0:
                a._accumulate(g * a.data / norm)

        return vjp

    return _emit(np.float64(norm), (a,), build)


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two vectors.

    A zero-norm operand makes the result exactly 0 with zero gradient, so
    dead embeddings never produce NaNs.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ContractViolation("cosine_similarity expects two vectors of equal length")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    denom = na * nb
    if denom == 0.0:
        cos = 0.0
    else:
        cos = float(a.data @ b.data) / denom

    def build(out):
        def vjp(g):
            if denom == 0.0:
                return
            if a.requires_grad:
                a._accumulate(g * (b.data / denom - cos * a.data / (na * na)))
            if b.requires_grad:
                b._accumulate(g * (a.data / denom - cos * b.data / (nb * nb)))

        return vjp

    return _emit(np.float64(cos), (a, b), build)


def rowwise_cosine(a, b) -> Tensor:
    """Cosine similarity between every row of ``a`` and the vector ``b``.

    Rows with zero norm (or a zero ``b``) yield 0 with zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 1 or a.data.shape[1] != b.data.shape[0]:
        raise ContractViolation("rowwise_cosine expects (n, d) rows and a (d,) vector")
    row_norms = np.linalg.norm(a.data, axis=1)
    b_norm = float(np.linalg.norm(b.data))
    denom = row_norms * b_norm
    live = denom > 0.0
    dots = a.data @ b.data
    cos = np.where(live, dots / np.where(live, denom, 1.0), 0.0)

    def build(out):
        def vjp(g):
            g_live = np.where(live, g, 0.0)
            if a.requires_grad:
                ga = (g_live / np.where(live, denom, 1.0))[:, None] * b.data[None, :]
                ga -= (g_live * cos / np.where(live, row_norms * row_norms, 1.0))[:, None] * a.data
                a._accumulate(np.where(live[:, None], ga, 0.0))
            if b.requires_grad and b_norm > 0.0:
                coeffs = g_live / np.where(live, denom, 1.0)
                gb = coeffs @ a.data
                gb -= float(g_live @ cos) * b.data / (b_norm * b_norm)
                b._accumulate(gb)

        return vjp

    return _emit(cos, (a, b), build)


# ---------------------------------------------------------------------------
# Losses


def softmax_cross_entropy(logits, target_indices) -> Tensor:
    """Negative log of the softmax mass assigned to a set of target indices.

    The loss is ``-log(sum_{i in targets} softmax(logits)_i)``; it is
    non-negative and ``exp(-loss)`` equals the probability mass of the
    target set.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 1:
        raise ContractViolation("softmax_cross_entropy expects rank 1 logits")
    targets = np.unique(np.asarray(list(target_indices), dtype=np.int64))
    if targets.size == 0:
        raise ContractViolation("softmax_cross_entropy needs at least one target index")
    if targets.min() < 0 or targets.max() >= logits.data.shape[0]:
        raise ContractViolation("target index out of range")

    z = logits.data - logits.data.max()
    exp_z = np.exp(z)
    log_total = float(np.log(exp_z.sum()))
    zt = z[targets]
    mt = zt.max()
    log_target = float(mt + np.log(np.exp(zt - mt).sum()))
    loss = log_total - log_target

    def build(out):
        p = exp_z / exp_z.sum()
        q = np.zeros_like(p)
        q[targets] = np.exp(zt - log_target)

        def vjp(g):
            if logits.requires_grad:
                logits._accumulate(g * (p - q))

        return vjp

    return _emit(np.float64(loss), (logits,), build)


def softmax_cross_entropy_batch(logits, target_index) -> Tensor:
    """Mean single-target cross entropy over the rows of a logit matrix."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ContractViolation("softmax_cross_entropy_batch expects rank 2 logits")
    targets = np.asarray(target_index, dtype=np.int64)
    n_rows, n_cols = logits.data.shape
    if targets.shape != (n_rows,):
        raise ContractViolation("one target index per logit row is required")
    if n_rows == 0:
        raise ContractViolation("empty logit batch")
    if targets.min() < 0 or targets.max() >= n_cols:
        raise ContractViolation("target index out of range")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    exp_z = np.exp(z)
    totals = exp_z.sum(axis=1)
    rows = np.arange(n_rows)
    losses = np.log(totals) - z[rows, targets]
    loss = float(losses.mean())

    def build(out):
        def vjp(g):
            if logits.requires_grad:
                grad = exp_z / totals[:, None]
                grad[rows, targets] -= 1.0
                logits._accumulate(g * grad / n_rows)

        return vjp

    return _emit(np.float64(loss), (logits,), build)


# ---------------------------------------------------------------------------
# Indexed access


def gather_rows(a, indices) -> Tensor:
    """Select rows (leading-axis slices) of ``a`` by integer index."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation("gather_rows expects a flat index array")
    if a.data.ndim < 1:
        raise ContractViolation("gather_rows expects a tensor of rank 1 or higher")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractViolation("gather index out of range")

    def build(out):
        def vjp(g):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                np.add.at(buf, idx, g)
                a._accumulate(buf)

        return vjp

    return _emit(a.data[idx], (a,), build)


def scatter_add_rows(a, indices, n_rows: int) -> Tensor:
    """Sum the rows of ``a`` into an ``n_rows`` output at the given indices.

    Accumulation follows the index array order, so results are
    deterministic even with duplicate destinations.
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim < 1 or idx.shape != (a.data.shape[0],):
        raise ContractViolation("scatter_add_rows needs one destination per row")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ContractViolation("scatter index out of range")
    out_data = np.zeros((n_rows,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out_data, idx, a.data)

    def build(out):
        def vjp(g):
            if a.requires_grad:
                a._accumulate(g[idx])

        return vjp

    return _emit(out_data, (a,), build)


def combine_bases(coeffs, bases) -> Tensor:
    """Mix shared basis matrices into per-row weight matrices.

    ``coeffs`` has shape (r, b) and ``bases`` (b, d, d); the result is the
    (r, d, d) stack of linear combinations.
    """
    coeffs, bases = as_tensor(coeffs), as_tensor(bases)
    if coeffs.data.ndim != 2 or bases.data.ndim != 3 or coeffs.data.shape[1] != bases.data.shape[0]:
        raise ContractViolation("combine_bases expects (r, b) coefficients and (b, d, d) bases")
    out_data = np.tensordot(coeffs.data, bases.data, axes=(1, 0))

    def build(out):
        def vjp(g):
            if coeffs.requires_grad:
                coeffs._accumulate(np.tensordot(g, bases.data, axes=([1, 2], [1, 2])))
            if bases.requires_grad:
                bases._accumulate(np.tensordot(coeffs.data, g, axes=(0, 0)))

        return vjp

    return _emit(out_data, (coeffs, bases), build)


def batched_vecmat(mats, vecs) -> Tensor:
    """Apply one (d, d) matrix to one (d,) vector per row: out[e] = mats[e] @ vecs[e]."""
    mats, vecs = as_tensor(mats), as_tensor(vecs)
    if (
        mats.data.ndim != 3
        or vecs.data.ndim != 2
        or mats.data.shape[0] != vecs.data.shape[0]
        or mats.data.shape[2] != vecs.data.shape[1]
    ):
        raise ContractViolation("batched_vecmat expects (e, d, d) matrices and (e, d) vectors")
    out_data = np.einsum("eij,ej->ei", mats.data, vecs.data)

    def build(out):
        def vjp(g):
            if mats.requires_grad:
                mats._accumulate(np.einsum("ei,ej->eij", g, vecs.data))
            if vecs.requires_grad:
                vecs._accumulate(np.einsum("eij,ei->ej", mats.data, g))

        return vjp

    return _emit(out_data, (mats, vecs), build)


# ---------------------------------------------------------------------------
# Finite-difference verification


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be deterministic and rebuild its computation from the current
    contents of ``params`` on every call.  Returns the worst relative error
    over all coordinates of all parameters, where the relative error of an
    analytic value ``a`` against a numeric value ``n`` is
    ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    for p in params:
        if not p.requires_grad:
            raise GradCheckError("all checked parameters must require gradients")
        p.zero_grad()

    with Tape() as tape:
        out = f()
        if out.data.shape != ():
            raise GradCheckError("grad_check target must be scalar")
        if not np.isfinite(out.data):
            raise GradCheckError("non-finite forward value")
        tape.backward(out)

    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def probe() -> float:
        value = f()
        if not np.isfinite(value.data):
            raise GradCheckError("non-finite forward value during perturbation")
        return float(value.data)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = probe()
            flat[i] = original - step
            f_minus = probe()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
