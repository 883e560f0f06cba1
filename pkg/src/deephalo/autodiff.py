"""Reverse-mode automatic differentiation over dense float64 matrices.

Values are 2-D numpy arrays; 1-D inputs are treated as column vectors.
Every operation returns a :class:`Node` that records its inputs together
with a local vector-Jacobian rule, so a fresh tape is built per forward
pass and discarded after :func:`backward`.

Reductions that cross item slots (matrix-product contractions, masked
column means, full sums, softmax normalizers) use exactly rounded
summation via ``math.fsum``.  An exactly rounded sum does not depend on
the order of its summands, which is what turns the model-level
permutation and relabeling guarantees into literal equalities instead of
"equal up to reassociation".
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateSetError(ValueError):
    """A reduction was asked to aggregate over zero unmasked entries."""


def _as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _fsum(values) -> float:
    # fsum refuses infinities and can overflow its compensation terms;
    # fall back to plain summation so divergence surfaces as inf/nan at
    # the loss check instead of an opaque exception mid-tape.
    try:
        return math.fsum(values)
    except (OverflowError, ValueError):
        return float(np.sum(np.fromiter(values, dtype=float)))


def _row_fsums(a: np.ndarray) -> list[float]:
    if not np.isfinite(a).all():
        return np.sum(a, axis=1).tolist()
    return [math.fsum(row) for row in a.tolist()]


def exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product whose row contractions are exactly rounded sums."""
    m, k = a.shape
    kb, n = b.shape
    if k != kb:
        raise DimensionError(f"matmul shapes do not chain: {a.shape} x {b.shape}")
    if k == 1:
        # Outer product: one rounding per entry, nothing to reassociate.
        return a @ b
    out = np.empty((m, n))
    for c in range(n):
        out[:, c] = _row_fsums(a * b[:, c])
    return out


class Node:
    """One value on the tape.

    ``grad`` has the same shape as ``value`` and starts at zero; repeated
    :func:`backward` calls accumulate into it.  ``vjp`` maps the adjoint of
    this node to adjoint contributions for each parent (or ``None`` for
    parents that do not require gradients).
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "vjp")

    def __init__(
        self,
        value: np.ndarray,
        requires_grad: bool = False,
        parents: tuple["Node", ...] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
    ):
        self.value = value
        self.grad = np.zeros_like(value)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


def constant(value) -> Node:
    arr = _as_matrix(value)
    if not np.isfinite(arr).all():
        raise ValueError("constant entries must be finite")
    return Node(arr)


def parameter(value) -> Node:
    """Wrap live parameter storage; the array is not copied."""
    arr = _as_matrix(value)
    if not np.isfinite(arr).all():
        raise ValueError("parameter entries must be finite")
    return Node(arr, requires_grad=True)


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede consumers


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``grad`` for every ancestor.

    The root must be scalar (1x1).  Adjoints are propagated through a
    per-call buffer, so calling backward twice without zeroing gradients
    adds the same derivative twice.
    """
    if root.value.shape != (1, 1):
        raise DimensionError(f"backward root must be 1x1, got {root.value.shape}")
    order = _topo_order(root)
    adjoint: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad += g
        if node.vjp is None:
            continue
        for parent, contrib in zip(node.parents, node.vjp(g)):
            if contrib is None or not parent.requires_grad:
                continue
            held = adjoint.get(id(parent))
            adjoint[id(parent)] = contrib if held is None else held + contrib


def zero_gradients(nodes: Sequence[Node]) -> None:
    for n in nodes:
        n.grad[...] = 0.0


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    value = exact_matmul(a.value, b.value)

    def vjp(g):
        ga = exact_matmul(g, b.value.T) if a.requires_grad else None
        gb = exact_matmul(a.value.T, g) if b.requires_grad else None
        return ga, gb

    return Node(value, parents=(a, b), vjp=vjp)


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add shapes differ: {a.value.shape} vs {b.value.shape}")
    return Node(a.value + b.value, parents=(a, b), vjp=lambda g: (g, g))


def add_bias(a: Node, b: Node) -> Node:
    """Add a column vector to every column of ``a``."""
    if b.value.shape != (a.value.shape[0], 1):
        raise DimensionError(
            f"bias shape {b.value.shape} does not match rows of {a.value.shape}"
        )

    def vjp(g):
        gb = np.array(_row_fsums(g)).reshape(-1, 1) if b.requires_grad else None
        return g, gb

    return Node(a.value + b.value, parents=(a, b), vjp=vjp)


def add_scalar(a: Node, c: float) -> Node:
    return Node(a.value + float(c), parents=(a,), vjp=lambda g: (g,))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, parents=(a,), vjp=lambda g: (c * g,))


def hadamard(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise DimensionError(
            f"hadamard shapes differ: {a.value.shape} vs {b.value.shape}"
        )

    def vjp(g):
        ga = b.value * g if a.requires_grad else None
        gb = a.value * g if b.requires_grad else None
        return ga, gb

    return Node(a.value * b.value, parents=(a, b), vjp=vjp)


def elementwise_square(a: Node) -> Node:
    return Node(a.value * a.value, parents=(a,), vjp=lambda g: (2.0 * a.value * g,))


def relu(a: Node) -> Node:
    keep = a.value > 0
    return Node(np.where(keep, a.value, 0.0), parents=(a,), vjp=lambda g: (keep * g,))


def transpose(a: Node) -> Node:
    return Node(a.value.T.copy(), parents=(a,), vjp=lambda g: (g.T,))


def sum_all(a: Node) -> Node:
    value = np.array([[_fsum(a.value.ravel().tolist())]])
    return Node(value, parents=(a,), vjp=lambda g: (np.full_like(a.value, g[0, 0]),))


def slice_entry(a: Node, i: int, j: int) -> Node:
    value = np.array([[a.value[i, j]]])

    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[i, j] = g[0, 0]
        return (ga,)

    return Node(value, parents=(a,), vjp=vjp)


def scale_by(a: Node, s: Node) -> Node:
    """Multiply a matrix by a 1x1 node."""
    if s.value.shape != (1, 1):
        raise DimensionError(f"scale_by factor must be 1x1, got {s.value.shape}")
    sv = s.value[0, 0]

    def vjp(g):
        ga = sv * g if a.requires_grad else None
        gs = (
            np.array([[_fsum((g * a.value).ravel().tolist())]])
            if s.requires_grad
            else None
        )
        return ga, gs

    return Node(sv * a.value, parents=(a, s), vjp=vjp)


def mean_over_columns(a: Node, mask) -> Node:
    """Mean of the unmasked columns; masked columns never contribute.

    ``mask`` holds one flag per column.  The divisor is the number of
    unmasked columns, never the total column count.
    """
    mask = np.asarray(mask, dtype=bool).ravel()
    if mask.size != a.value.shape[1]:
        raise DimensionError(
            f"mask length {mask.size} does not match columns of {a.value.shape}"
        )
    cols = np.flatnonzero(mask)
    if cols.size == 0:
        raise DegenerateSetError("mean over an all-masked column set")
    count = float(cols.size)
    value = (np.array(_row_fsums(a.value[:, cols])) / count).reshape(-1, 1)

    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[:, cols] = g / count
        return (ga,)

    return Node(value, parents=(a,), vjp=vjp)


def sum_over_columns(a: Node, mask) -> Node:
    """Sum of the unmasked columns; masked columns never contribute."""
    mask = np.asarray(mask, dtype=bool).ravel()
    if mask.size != a.value.shape[1]:
        raise DimensionError(
            f"mask length {mask.size} does not match columns of {a.value.shape}"
        )
    cols = np.flatnonzero(mask)
    if cols.size == 0:
        raise DegenerateSetError("sum over an all-masked column set")
    value = np.array(_row_fsums(a.value[:, cols])).reshape(-1, 1)

    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[:, cols] = g
        return (ga,)

    return Node(value, parents=(a,), vjp=vjp)


def layer_norm(a: Node, gain: Node | None = None, bias: Node | None = None) -> Node:
    """Normalize each column to zero mean / unit variance, then affine.

    A zero-variance column maps to the bias (or zero when no affine is
    given): the variance floor is ``LAYER_NORM_EPS``.
    """
    if gain is not None and gain.value.shape != (a.value.shape[0], 1):
        raise DimensionError("layer_norm gain must be rows x 1")
    if bias is not None and bias.value.shape != (a.value.shape[0], 1):
        raise DimensionError("layer_norm bias must be rows x 1")
    mu = a.value.mean(axis=0, keepdims=True)
    centered = a.value - mu
    var = (centered * centered).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    out = xhat
    if gain is not None:
        out = out * gain.value
    if bias is not None:
        out = out + bias.value
    m = a.value.shape[0]

    def vjp(g):
        gh = g * gain.value if gain is not None else g
        mean_gh = gh.mean(axis=0, keepdims=True)
        mean_ghx = (gh * xhat).mean(axis=0, keepdims=True)
        ga = inv * (gh - mean_gh - xhat * mean_ghx) if a.requires_grad else None
        out_grads = [ga]
        if gain is not None:
            ggain = (
                np.array(_row_fsums(g * xhat)).reshape(-1, 1)
                if gain.requires_grad
                else None
            )
            out_grads.append(ggain)
        if bias is not None:
            gbias = (
                np.array(_row_fsums(g)).reshape(-1, 1) if bias.requires_grad else None
            )
            out_grads.append(gbias)
        return tuple(out_grads)

    parents = [a]
    if gain is not None:
        parents.append(gain)
    if bias is not None:
        parents.append(bias)
    return Node(out, parents=tuple(parents), vjp=vjp)


def _softmax_parts(u: Node, mask) -> tuple[np.ndarray, np.ndarray, float]:
    mask = np.asarray(mask, dtype=bool).ravel()
    if u.value.shape[1] != 1 or mask.size != u.value.shape[0]:
        raise DimensionError(
            f"softmax expects a column vector matching the mask, got {u.value.shape}"
        )
    if not mask.any():
        raise DegenerateSetError("softmax over an all-masked utility vector")
    vals = u.value[mask, 0]
    mx = vals.max()
    exps = np.exp(vals - mx)
    denom = _fsum(exps.tolist())
    return mask, exps, denom


def masked_softmax(u: Node, mask) -> Node:
    """Softmax over the unmasked entries; masked entries are exactly zero."""
    mask, exps, denom = _softmax_parts(u, mask)
    p = exps / denom
    out = np.zeros_like(u.value)
    out[mask, 0] = p

    def vjp(g):
        gm = g[mask, 0]
        inner = _fsum((gm * p).tolist())
        gu = np.zeros_like(u.value)
        gu[mask, 0] = p * (gm - inner)
        return (gu,)

    return Node(out, parents=(u,), vjp=vjp)


def masked_log_softmax(u: Node, mask) -> Node:
    """Log-probabilities over the unmasked entries; masked entries read 0."""
    mask, exps, denom = _softmax_parts(u, mask)
    logp = np.log(exps / denom)
    p = exps / denom
    out = np.zeros_like(u.value)
    out[mask, 0] = logp

    def vjp(g):
        gm = g[mask, 0]
        total = _fsum(gm.tolist())
        gu = np.zeros_like(u.value)
        gu[mask, 0] = gm - p * total
        return (gu,)

    return Node(out, parents=(u,), vjp=vjp)
