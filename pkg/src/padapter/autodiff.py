"""Dense float64 tensors with tape-based reverse-mode autodiff.

Values are C-order float64 numpy arrays.  An op either runs directly on
arrays (inference path, zero tracking overhead) or, when at least one operand
is a :class:`Traced` handle, records itself on the owning :class:`Tape` and
returns a new handle.  The op vocabulary is closed: matmul, transpose,
reshape, add/sub/mul, row masking, scalar scale, broadcast bias adds, row
gather, softmax, layer norm, gelu and mse.  There is no implicit numpy-style
broadcasting; every allowed shape pattern is explicit in its op.

``backward`` walks the tape in reverse topological order (creation order) and
returns gradients for every registered leaf, zeros for leaves the loss never
touched.
"""

from __future__ import annotations

import os

import numpy as np

Array = np.ndarray

_CHECK_FINITE = os.environ.get("PADAPTER_CHECKS", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class ContractError(ValueError):
    """An op precondition was violated."""


def as_tensor(x, shape=None) -> Array:
    """Coerce to a C-order float64 array, optionally checking shape."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None and tuple(a.shape) != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {tuple(a.shape)}")
    return a


class Node:
    __slots__ = ("op", "parents", "bwd")

    def __init__(self, op: str, parents: tuple[int, ...], bwd):
        self.op = op
        self.parents = parents
        self.bwd = bwd


class Traced:
    """Handle to a tape node; ``data`` is the node's value array."""

    __slots__ = ("tape", "idx", "data")

    def __init__(self, tape: "Tape", idx: int, data: Array):
        self.tape = tape
        self.idx = idx
        self.data = data

    @property
    def shape(self):
        return self.data.shape


class Tape:
    """Append-only operation record; list order is the topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaf_shapes: dict[int, tuple[int, ...]] = {}

    def _record(self, op: str, value: Array, parents: tuple[int, ...], bwd) -> Traced:
        if _CHECK_FINITE and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite values produced by op {op!r}")
        idx = len(self.nodes)
        self.nodes.append(Node(op, parents, bwd))
        return Traced(self, idx, value)

    def leaf(self, value) -> Traced:
        t = self._record("leaf", as_tensor(value), (), None)
        self.leaf_shapes[t.idx] = t.data.shape
        return t


def value(x) -> Array:
    """The underlying array of a Traced or plain value."""
    return x.data if isinstance(x, Traced) else as_tensor(x)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Traced):
            return x.tape
    return None


def _pidx(x) -> int:
    return x.idx if isinstance(x, Traced) else -1


def backward(tape: Tape, loss: Traced) -> dict[int, Array]:
    """Gradients of a scalar loss for every leaf registered on the tape.

    Leaves the loss does not depend on get zero gradients of their own shape.
    """
    if not isinstance(loss, Traced) or loss.tape is not tape:
        raise ContractError("loss must be a traced node of this tape")
    if loss.data.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: list[Array | None] = [None] * len(tape.nodes)
    grads[loss.idx] = np.ones((), dtype=np.float64)
    for idx in range(loss.idx, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.bwd is None:
            continue
        for pidx, pg in zip(node.parents, node.bwd(g)):
            if pidx < 0 or pg is None:
                continue
            if grads[pidx] is None:
                grads[pidx] = pg
            else:
                grads[pidx] = grads[pidx] + pg
        grads[idx] = None if idx != loss.idx else g
    out: dict[int, Array] = {}
    for lid, shape in tape.leaf_shapes.items():
        g = grads[lid]
        out[lid] = np.zeros(shape, dtype=np.float64) if g is None else g
    return out


def grads_for(tape: Tape, loss: Traced, leaves: dict[str, Traced]) -> dict[str, Array]:
    """Convenience wrapper: named leaf handles -> named gradients."""
    raw = backward(tape, loss)
    return {name: raw[leaf.idx] for name, leaf in leaves.items()}


# ---------------------------------------------------------------------------
# op vocabulary
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product.  Allowed: (m,k)@(k,n); (...,m,k)@(k,n) with the 2-d
    operand shared across leading axes; (L...,m,k)@(L...,k,n) with identical
    leading axes."""
    A, B = value(a), value(b)
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {A.shape} @ {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {A.shape} @ {B.shape}")
    shared_b = B.ndim == 2 and A.ndim > 2
    if not shared_b and A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {A.shape} @ {B.shape}")
    if shared_b:
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[-1],))
    else:
        out = A @ B
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bwd(g):
        ga = gb = None
        if isinstance(a, Traced):
            if shared_b or B.ndim == 2:
                ga = (g.reshape(-1, B.shape[-1]) @ B.T).reshape(A.shape)
            else:
                ga = g @ np.swapaxes(B, -1, -2)
        if isinstance(b, Traced):
            if shared_b:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            elif B.ndim == 2:
                gb = A.T @ g
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return tape._record("matmul", out, (_pidx(a), _pidx(b)), bwd)


def transpose(x, axes: tuple[int, ...]):
    X = value(x)
    out = np.transpose(X, axes)
    tape = _tape_of(x)
    if tape is None:
        return out
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return tape._record("transpose", out, (_pidx(x),), bwd)


def swap_last2(x):
    X = value(x)
    axes = tuple(range(X.ndim - 2)) + (X.ndim - 1, X.ndim - 2)
    return transpose(x, axes)


def reshape(x, shape):
    X = value(x)
    out = X.reshape(shape)
    tape = _tape_of(x)
    if tape is None:
        return out
    orig = X.shape

    def bwd(g):
        return (g.reshape(orig),)

    return tape._record("reshape", out, (_pidx(x),), bwd)


def _same_shape(op, A, B):
    if A.shape != B.shape:
        raise ShapeError(f"{op} needs identical shapes, got {A.shape} and {B.shape}")


def add(a, b):
    A, B = value(a), value(b)
    _same_shape("add", A, B)
    out = A + B
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bwd(g):
        return (g if isinstance(a, Traced) else None,
                g if isinstance(b, Traced) else None)

    return tape._record("add", out, (_pidx(a), _pidx(b)), bwd)


def sub(a, b):
    A, B = value(a), value(b)
    _same_shape("sub", A, B)
    out = A - B
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bwd(g):
        return (g if isinstance(a, Traced) else None,
                -g if isinstance(b, Traced) else None)

    return tape._record("sub", out, (_pidx(a), _pidx(b)), bwd)


def mul(a, b):
    """Elementwise (Hadamard) product of same-shape tensors."""
    A, B = value(a), value(b)
    _same_shape("mul", A, B)
    out = A * B
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bwd(g):
        return (g * B if isinstance(a, Traced) else None,
                g * A if isinstance(b, Traced) else None)

    return tape._record("mul", out, (_pidx(a), _pidx(b)), bwd)


def mask_rows(x, m):
    """Hadamard mask over token rows: x (...,N,d) scaled per-row by m (...,N)."""
    X, M = value(x), value(m)
    if X.shape[:-1] != M.shape:
        raise ShapeError(f"mask_rows: rows of {X.shape} do not match mask {M.shape}")
    out = X * M[..., None]
    tape = _tape_of(x)
    if tape is None:
        return out

    def bwd(g):
        return (g * M[..., None],)

    return tape._record("mask_rows", out, (_pidx(x),), bwd)


def scale(x, s: float):
    X = value(x)
    s = float(s)
    out = X * s
    tape = _tape_of(x)
    if tape is None:
        return out

    def bwd(g):
        return (g * s,)

    return tape._record("scale", out, (_pidx(x),), bwd)


def add_bcast0(x, v):
    """x (B, *rest) + v (*rest), v shared across the leading axis."""
    X, V = value(x), value(v)
    if X.shape[1:] != V.shape:
        raise ShapeError(f"add_bcast0: {X.shape} cannot take bias {V.shape}")
    out = X + V[None]
    tape = _tape_of(x, v)
    if tape is None:
        return out

    def bwd(g):
        return (g if isinstance(x, Traced) else None,
                g.sum(axis=0) if isinstance(v, Traced) else None)

    return tape._record("add_bcast0", out, (_pidx(x), _pidx(v)), bwd)


def add_token_bias(x, v):
    """x (..., N, d) + v (..., 1, d), bias shared across token rows."""
    X, V = value(x), value(v)
    if V.shape[-2] != 1 or V.shape[:-2] != X.shape[:-2] or V.shape[-1] != X.shape[-1]:
        raise ShapeError(f"add_token_bias: {X.shape} cannot take bias {V.shape}")
    out = X + V
    tape = _tape_of(x, v)
    if tape is None:
        return out

    def bwd(g):
        return (g if isinstance(x, Traced) else None,
                g.sum(axis=-2, keepdims=True) if isinstance(v, Traced) else None)

    return tape._record("add_token_bias", out, (_pidx(x), _pidx(v)), bwd)


def take_rows(table, ids):
    """Gather rows of a (V, d) table by an integer id array; grads scatter-add."""
    T = value(table)
    idx = np.asarray(ids, dtype=np.int64)
    if T.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-d table, got {T.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= T.shape[0]):
        raise ContractError(f"row id out of range for table with {T.shape[0]} rows")
    out = T[idx]
    tape = _tape_of(table)
    if tape is None:
        return out

    def bwd(g):
        gt = np.zeros_like(T)
        np.add.at(gt, idx, g)
        return (gt,)

    return tape._record("take_rows", out, (_pidx(table),), bwd)


def softmax(x):
    """Row softmax over the last axis, max-subtracted for stability."""
    X = value(x)
    if not np.all(np.isfinite(X)):
        raise ContractError("softmax input must be finite")
    out = X - X.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    tape = _tape_of(x)
    if tape is None:
        return out

    def bwd(g):
        tmp = g * out
        dot = tmp.sum(axis=-1, keepdims=True)
        np.subtract(g, dot, out=tmp)
        tmp *= out
        return (tmp,)

    return tape._record("softmax", out, (_pidx(x),), bwd)


def layer_norm(x, eps: float = 1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine terms)."""
    X = value(x)
    mu = X.mean(axis=-1, keepdims=True)
    out = X - mu
    var = np.einsum("...i,...i->...", out, out)[..., None] / X.shape[-1]
    inv = 1.0 / np.sqrt(var + eps)
    out *= inv
    tape = _tape_of(x)
    if tape is None:
        return out

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        tmp = g * out
        gx = tmp.mean(axis=-1, keepdims=True)
        np.multiply(out, gx, out=tmp)
        tmp += gm
        np.subtract(g, tmp, out=tmp)
        tmp *= inv
        return (tmp,)

    return tape._record("layer_norm", out, (_pidx(x),), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x):
    """tanh-form gelu."""
    X = value(x)
    t = X * X
    np.multiply(t, _GELU_C * _GELU_A, out=t)
    t += _GELU_C
    t *= X
    np.tanh(t, out=t)
    out = t + 1.0
    out *= X
    out *= 0.5
    tape = _tape_of(x)
    if tape is None:
        return out

    def bwd(g):
        w = X * X
        np.multiply(w, 3.0 * _GELU_A, out=w)
        w += 1.0
        w *= X
        w *= 0.5 * _GELU_C
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        w *= sech2
        np.multiply(t, 0.5, out=sech2)
        w += sech2
        w += 0.5
        w *= g
        return (w,)

    return tape._record("gelu", out, (_pidx(x),), bwd)


def mse(a, b):
    """Mean squared error over all elements; returns a scalar."""
    A, B = value(a), value(b)
    _same_shape("mse", A, B)
    diff = A - B
    out = np.asarray((diff * diff).mean(), dtype=np.float64)
    tape = _tape_of(a, b)
    if tape is None:
        return float(out)
    coeff = 2.0 / diff.size

    def bwd(g):
        base = float(g) * coeff * diff
        return (base if isinstance(a, Traced) else None,
                -base if isinstance(b, Traced) else None)

    return tape._record("mse", out, (_pidx(a), _pidx(b)), bwd)
