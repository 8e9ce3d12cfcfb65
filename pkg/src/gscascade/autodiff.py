"""Minimal reverse-mode automatic differentiation over numpy arrays.

Everything in the fitting pipeline that needs parameter gradients is expressed
with the ops in this module, so the chain rule through the full deformation
(including covariance propagation and its eigendecomposition) is exact.

Conventions:
  * float64 everywhere; shapes follow numpy broadcasting.
  * Ops build a graph only when an input has requires_grad=True; otherwise they
    are plain (slightly wrapped) numpy calls.
  * Gradient accumulation order is the reverse topological order of creation,
    and scatter-adds use np.add.at, so backward passes are deterministic.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "leaf",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tsum",
    "tmean",
    "matmul",
    "matvec",
    "outer",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "square",
    "absval",
    "relu",
    "clamp_min",
    "where",
    "gather",
    "stack_last",
    "unstack_last",
    "reshape",
    "transpose_last2",
    "eigh3",
    "jacobi_eigh3",
    "eigh3_offdiag_tol",
]


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is not None:
                node._vjp(node.grad)
            # free graph refs as we go; grads on leaves survive
            node._vjp = None
            node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def leaf(value):
    """A differentiable input; gradients accumulate on .grad."""
    return Tensor(value, requires_grad=True)


def constant(value):
    return Tensor(value, requires_grad=False)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(value, parents, vjp):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, parents=parents, vjp=vjp)
    return Tensor(value)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    v = a.value + b.value

    def vjp(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return _make(v, (a, b), vjp)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    v = a.value - b.value

    def vjp(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return _make(v, (a, b), vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    v = a.value * b.value

    def vjp(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(v, (a, b), vjp)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    v = a.value / b.value

    def vjp(g):
        _accum(a, _unbroadcast(g / b.value, a.value.shape))
        _accum(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _make(v, (a, b), vjp)


def neg(a):
    a = _wrap(a)

    def vjp(g):
        _accum(a, -g)

    return _make(-a.value, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    v = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.value.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.value.shape).copy())

    return _make(v, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        n = a.value.size
    else:
        n = a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra (batched over leading axes; operand batch shapes must match)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    v = a.value @ b.value

    def vjp(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape))

    return _make(v, (a, b), vjp)


def matvec(a, x):
    """(..., m, n) @ (..., n) -> (..., m)."""
    a, x = _wrap(a), _wrap(x)
    v = np.einsum("...ij,...j->...i", a.value, x.value)

    def vjp(g):
        _accum(a, _unbroadcast(np.einsum("...i,...j->...ij", g, x.value), a.value.shape))
        _accum(x, _unbroadcast(np.einsum("...ij,...i->...j", a.value, g), x.value.shape))

    return _make(v, (a, x), vjp)


def outer(u, w):
    """(..., m) x (..., n) -> (..., m, n)."""
    u, w = _wrap(u), _wrap(w)
    v = np.einsum("...i,...j->...ij", u.value, w.value)

    def vjp(g):
        _accum(u, _unbroadcast(np.einsum("...ij,...j->...i", g, w.value), u.value.shape))
        _accum(w, _unbroadcast(np.einsum("...ij,...i->...j", g, u.value), w.value.shape))

    return _make(v, (u, w), vjp)


def transpose_last2(a):
    a = _wrap(a)

    def vjp(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.value, -1, -2), (a,), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def tanh(a):
    a = _wrap(a)
    v = np.tanh(a.value)

    def vjp(g):
        _accum(a, g * (1.0 - v * v))

    return _make(v, (a,), vjp)


def exp(a):
    a = _wrap(a)
    v = np.exp(a.value)

    def vjp(g):
        _accum(a, g * v)

    return _make(v, (a,), vjp)


def log(a):
    a = _wrap(a)

    def vjp(g):
        _accum(a, g / a.value)

    return _make(np.log(a.value), (a,), vjp)


def sqrt(a):
    a = _wrap(a)
    v = np.sqrt(a.value)

    def vjp(g):
        _accum(a, g * (0.5 / v))

    return _make(v, (a,), vjp)


def square(a):
    a = _wrap(a)

    def vjp(g):
        _accum(a, g * (2.0 * a.value))

    return _make(a.value * a.value, (a,), vjp)


def absval(a):
    """|a| with subgradient 0 at a == 0."""
    a = _wrap(a)

    def vjp(g):
        _accum(a, g * np.sign(a.value))

    return _make(np.abs(a.value), (a,), vjp)


def relu(a):
    """max(a, 0) with subgradient 0 at the kink."""
    a = _wrap(a)
    mask = a.value > 0.0

    def vjp(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.value, 0.0), (a,), vjp)


def clamp_min(a, floor):
    """max(a, floor) for a constant floor; gradient passes only where a > floor."""
    a = _wrap(a)
    mask = a.value > floor

    def vjp(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.value, floor), (a,), vjp)


def where(mask, a, b):
    """Select by a constant boolean mask (no gradient w.r.t. the mask)."""
    a, b = _wrap(a), _wrap(b)
    mask = np.asarray(mask, dtype=bool)
    v = np.where(mask, a.value, b.value)

    def vjp(g):
        _accum(a, _unbroadcast(np.where(mask, g, 0.0), a.value.shape))
        _accum(b, _unbroadcast(np.where(mask, 0.0, g), b.value.shape))

    return _make(v, (a, b), vjp)


# ---------------------------------------------------------------------------
# indexing / shaping


def gather(a, idx):
    """Row lookup a[idx] along axis 0; backward scatter-adds with np.add.at."""
    a = _wrap(a)
    idx = np.asarray(idx)
    v = a.value[idx]

    def vjp(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        np.add.at(a.grad, idx, g)

    return _make(v, (a,), vjp)


def stack_last(parts):
    """Stack a list of equally shaped tensors along a new trailing axis."""
    parts = [_wrap(p) for p in parts]
    v = np.stack([p.value for p in parts], axis=-1)

    def vjp(g):
        for i, p in enumerate(parts):
            _accum(p, g[..., i])

    return _make(v, tuple(parts), vjp)


def unstack_last(a):
    """Inverse of stack_last: split the trailing axis into a list of tensors."""
    a = _wrap(a)
    n = a.value.shape[-1]
    out = []
    for i in range(n):
        def vjp(g, i=i):
            gg = np.zeros_like(a.value)
            gg[..., i] = g
            _accum(a, gg)

        out.append(_make(np.ascontiguousarray(a.value[..., i]), (a,), vjp))
    return out


def reshape(a, shape):
    a = _wrap(a)
    old = a.value.shape

    def vjp(g):
        _accum(a, g.reshape(old))

    return _make(a.value.reshape(shape), (a,), vjp)


# ---------------------------------------------------------------------------
# symmetric 3x3 eigendecomposition

# Relative off-diagonal Frobenius residual at which the cyclic Jacobi sweep
# stops; also the documented accuracy of the factorization.
eigh3_offdiag_tol = 1e-10

# Smoothing of 1/(lambda_j - lambda_i) in the backward pass; keeps gradients
# finite near (physically meaningless) repeated-eigenvalue configurations
# while staying exact to ~(eps/gap)^2 for well separated spectra.
_EIG_GAP_EPS = 1e-9


def jacobi_eigh3(S, tol=eigh3_offdiag_tol, max_sweeps=30):
    """Batched cyclic Jacobi diagonalization of symmetric 3x3 matrices.

    Returns (evals, evecs) with S = V diag(w) V^T, V a proper rotation.
    Eigenvalues come out unsorted, in whatever axis order the sweep leaves
    them; callers that need a canonical order sort on top. Convergence is
    declared when the off-diagonal Frobenius mass drops below tol relative
    to the matrix norm.
    """
    S = np.asarray(S, dtype=np.float64)
    A = S.copy()
    V = np.zeros_like(A)
    V[..., 0, 0] = 1.0
    V[..., 1, 1] = 1.0
    V[..., 2, 2] = 1.0
    norm = np.sqrt(np.einsum("...ij,...ij->...", S, S))
    thresh = tol * np.maximum(norm, 1e-300)

    pairs = ((0, 1), (0, 2), (1, 2))
    for _ in range(max_sweeps):
        off = np.sqrt(
            A[..., 0, 1] ** 2 + A[..., 0, 2] ** 2 + A[..., 1, 2] ** 2
        )
        if np.all(off <= thresh):
            break
        for p, q in pairs:
            apq = A[..., p, q]
            app = A[..., p, p]
            aqq = A[..., q, q]
            nonzero = np.abs(apq) > 1e-300
            tau = np.where(nonzero, (aqq - app) / np.where(nonzero, 2.0 * apq, 1.0), 0.0)
            sign_tau = np.where(tau >= 0.0, 1.0, -1.0)
            # |tau| can be ~1/eps when the off-diagonal is tiny; tau*tau then
            # overflows to inf, which still yields the correct t -> 0 limit.
            with np.errstate(over="ignore"):
                t = np.where(
                    nonzero, sign_tau / (np.abs(tau) + np.sqrt(1.0 + tau * tau)), 0.0
                )
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c

            r = 3 - p - q  # the untouched index
            arp = A[..., r, p].copy()
            arq = A[..., r, q].copy()
            A[..., p, p] = app - t * apq
            A[..., q, q] = aqq + t * apq
            A[..., p, q] = 0.0
            A[..., q, p] = 0.0
            A[..., r, p] = c * arp - s * arq
            A[..., p, r] = A[..., r, p]
            A[..., r, q] = s * arp + c * arq
            A[..., q, r] = A[..., r, q]

            vp = V[..., :, p].copy()
            vq = V[..., :, q].copy()
            V[..., :, p] = c[..., None] * vp - s[..., None] * vq
            V[..., :, q] = s[..., None] * vp + c[..., None] * vq

    evals = np.stack([A[..., 0, 0], A[..., 1, 1], A[..., 2, 2]], axis=-1)
    return evals, V


def eigh3(S):
    """Differentiable symmetric 3x3 eigendecomposition (tape primitive).

    Forward uses the Jacobi routine above; backward is the standard
    eigendecomposition adjoint restricted to symmetric perturbations:

        dS = V (diag(dw) + F o (V^T dV)) V^T,  F_ij = 1/(w_j - w_i),

    symmetrized, with the gap denominators smoothed by _EIG_GAP_EPS.
    Returns (evals, evecs) as two tensors.
    """
    S = _wrap(S)
    w, V = jacobi_eigh3(S.value)

    out_w = None
    out_V = None

    def vjp_w(g):
        _backprop(g, None)

    def vjp_V(g):
        _backprop(None, g)

    def _backprop(gw, gV):
        M = np.zeros(V.shape, dtype=np.float64)
        if gw is not None:
            M[..., 0, 0] = gw[..., 0]
            M[..., 1, 1] = gw[..., 1]
            M[..., 2, 2] = gw[..., 2]
        if gV is not None:
            gap = w[..., None, :] - w[..., :, None]  # gap[i,j] = w_j - w_i
            F = gap / (gap * gap + _EIG_GAP_EPS * _EIG_GAP_EPS)
            for i in range(3):
                F[..., i, i] = 0.0
            M = M + F * (np.swapaxes(V, -1, -2) @ gV)
        gS = V @ M @ np.swapaxes(V, -1, -2)
        gS = 0.5 * (gS + np.swapaxes(gS, -1, -2))
        _accum(S, gS)

    out_w = _make(w, (S,), vjp_w)
    out_V = _make(V, (S,), vjp_V)
    return out_w, out_V
