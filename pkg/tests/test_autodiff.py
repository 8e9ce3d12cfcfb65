"""Gradient checks for the reverse-mode tape.

Every primitive is checked against central finite differences on random
inputs; the batched 3x3 eigensolver is additionally checked against
numpy.linalg.eigh as an independent oracle.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gscascade.autodiff as ad


def numeric_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar-valued fn at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = g.ravel()
    xf = x.ravel()
    for i in range(x.size):
        orig = xf[i]
        xf[i] = orig + eps
        fp = fn(x)
        xf[i] = orig - eps
        fm = fn(x)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * eps)
    return g


def check_unary(op, x, atol=1e-8, rtol=1e-5):
    def value(v):
        return float(ad.tsum(op(ad.leaf(v))).value)

    t = ad.leaf(x)
    out = ad.tsum(op(t))
    out.backward()
    num = numeric_grad(value, x.copy())
    np.testing.assert_allclose(t.grad, num, atol=atol, rtol=rtol)


def test_tensor_repr_and_shape():
    t = ad.leaf(np.ones((2, 3)))
    assert t.shape == (2, 3)
    assert t.requires_grad


def test_add_mul_broadcast_grads():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))

    ta, tb = ad.leaf(a), ad.leaf(b)
    out = ad.tsum(ad.mul(ta + tb, ta))
    out.backward()

    def value(av, bv):
        return float(np.sum((av + bv) * av))

    ga = numeric_grad(lambda v: value(v, b), a.copy())
    gb = numeric_grad(lambda v: value(a, v), b.copy())
    np.testing.assert_allclose(ta.grad, ga, atol=1e-7)
    np.testing.assert_allclose(tb.grad, gb, atol=1e-7)


def test_sub_div_neg_grads():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5,)) + 3.0
    b = rng.normal(size=(5,)) + 3.0
    ta, tb = ad.leaf(a), ad.leaf(b)
    out = ad.tsum(ad.div(ta - tb, tb) - (-ta))
    out.backward()

    def value(av, bv):
        return float(np.sum((av - bv) / bv + av))

    np.testing.assert_allclose(ta.grad, numeric_grad(lambda v: value(v, b), a.copy()), atol=1e-7)
    np.testing.assert_allclose(tb.grad, numeric_grad(lambda v: value(a, v), b.copy()), atol=1e-6, rtol=1e-5)


@pytest.mark.parametrize(
    "op",
    [ad.tanh, ad.exp, ad.sqrt, ad.square, ad.absval],
    ids=["tanh", "exp", "sqrt", "square", "absval"],
)
def test_elementwise_grads(op):
    rng = np.random.default_rng(2)
    x = rng.uniform(0.2, 2.0, size=(4, 2))  # positive, away from |x|=0 kink
    check_unary(op, x)


def test_absval_zero_has_zero_grad():
    t = ad.leaf(np.array([0.0, -1.5, 2.0]))
    ad.tsum(ad.absval(t)).backward()
    np.testing.assert_array_equal(t.grad, [0.0, -1.0, 1.0])


def test_relu_and_clamp_min_grads():
    x = np.array([-1.0, 0.5, 2.0, -0.2])
    t = ad.leaf(x)
    ad.tsum(ad.relu(t)).backward()
    np.testing.assert_array_equal(t.grad, [0.0, 1.0, 1.0, 0.0])

    t2 = ad.leaf(x)
    ad.tsum(ad.clamp_min(t2, 0.4)).backward()
    np.testing.assert_array_equal(t2.grad, [0.0, 1.0, 1.0, 0.0])


def test_tmean_axis_grad():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4))
    t = ad.leaf(x)
    ad.tsum(ad.square(ad.tmean(t, axis=0))).backward()

    def value(v):
        return float(np.sum(np.mean(v, axis=0) ** 2))

    np.testing.assert_allclose(t.grad, numeric_grad(value, x.copy()), atol=1e-7)


def test_matmul_matvec_outer_grads():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(5, 3, 3))
    B = rng.normal(size=(5, 3, 3))
    v = rng.normal(size=(5, 3))

    tA, tB, tv = ad.leaf(A), ad.leaf(B), ad.leaf(v)
    out = ad.tsum(ad.matvec(ad.matmul(tA, tB), tv)) + ad.tsum(ad.outer(tv, tv))
    out.backward()

    def value(Av, Bv, vv):
        return float(
            np.sum(np.einsum("nij,njk,nk->ni", Av, Bv, vv))
            + np.sum(np.einsum("ni,nj->nij", vv, vv))
        )

    np.testing.assert_allclose(tA.grad, numeric_grad(lambda x: value(x, B, v), A.copy()), atol=1e-6)
    np.testing.assert_allclose(tB.grad, numeric_grad(lambda x: value(A, x, v), B.copy()), atol=1e-6)
    np.testing.assert_allclose(tv.grad, numeric_grad(lambda x: value(A, B, x), v.copy()), atol=1e-6)


def test_transpose_last2_grad():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(4, 3, 3))
    t = ad.leaf(A)
    ad.tsum(ad.mul(ad.transpose_last2(t), ad.constant(A))).backward()
    np.testing.assert_allclose(t.grad, np.swapaxes(A, -1, -2), atol=1e-12)


def test_gather_accumulates_duplicate_indices():
    x = np.array([1.0, 2.0, 3.0])
    idx = np.array([0, 0, 2, 2, 2])
    t = ad.leaf(x)
    ad.tsum(ad.gather(t, idx)).backward()
    np.testing.assert_array_equal(t.grad, [2.0, 0.0, 3.0])


def test_where_selects_and_masks_grad():
    x = np.array([1.0, -2.0, 3.0])
    mask = np.array([True, False, True])
    t = ad.leaf(x)
    out = ad.where(mask, ad.square(t), ad.mul(t, 10.0))
    ad.tsum(out).backward()
    np.testing.assert_allclose(out.value, [1.0, -20.0, 9.0])
    np.testing.assert_allclose(t.grad, [2.0, 10.0, 6.0])


def test_stack_unstack_reshape_roundtrip_grads():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 4))
    t = ad.leaf(x)
    parts = ad.unstack_last(t)
    assert len(parts) == 4
    re = ad.stack_last(parts)
    flat = ad.reshape(re, (20,))
    ad.tsum(ad.square(flat)).backward()
    np.testing.assert_allclose(t.grad, 2.0 * x, atol=1e-12)


def test_backward_accumulates_through_shared_subexpression():
    x = np.array([2.0])
    t = ad.leaf(x)
    y = ad.square(t)
    out = y + y
    out.backward()
    np.testing.assert_allclose(t.grad, [8.0])


def test_constant_gets_no_grad():
    c = ad.constant(np.ones(3))
    t = ad.leaf(np.ones(3))
    ad.tsum(ad.mul(c, t)).backward()
    assert c.grad is None
    np.testing.assert_array_equal(t.grad, np.ones(3))


# ---------------------------------------------------------------------------
# eigensolver


def random_spd(rng, n, spread=1.0):
    A = rng.normal(size=(n, 3, 3)) * spread
    return A @ np.swapaxes(A, -1, -2) + 0.05 * np.eye(3)


def test_jacobi_matches_numpy_eigh():
    rng = np.random.default_rng(7)
    S = random_spd(rng, 200)
    w, V = ad.jacobi_eigh3(S)
    recon = np.einsum("...ij,...j,...kj->...ik", V, w, V)
    np.testing.assert_allclose(recon, S, atol=1e-12)
    np.testing.assert_allclose(
        np.sort(w, axis=-1), np.linalg.eigvalsh(S), atol=1e-11, rtol=1e-11
    )
    np.testing.assert_allclose(np.linalg.det(V), 1.0, atol=1e-12)


def test_jacobi_diagonal_input_is_fixed_point():
    S = np.diag([3.0, 1.0, 2.0])[None]
    w, V = ad.jacobi_eigh3(S)
    np.testing.assert_array_equal(w[0], [3.0, 1.0, 2.0])
    np.testing.assert_array_equal(V[0], np.eye(3))


def test_jacobi_handles_repeated_eigenvalues():
    S = np.eye(3)[None] * 2.0
    w, V = ad.jacobi_eigh3(S)
    np.testing.assert_allclose(w[0], [2.0, 2.0, 2.0])
    np.testing.assert_allclose(V[0] @ V[0].T, np.eye(3), atol=1e-14)


def test_eigh3_gradients_match_fd():
    rng = np.random.default_rng(8)
    S = random_spd(rng, 6)
    # random but fixed linear functional of (w, V) keeps the check generic
    aw = rng.normal(size=(6, 3))
    aV = rng.normal(size=(6, 3, 3))

    def value(Sv):
        w, V = ad.jacobi_eigh3(Sv)
        # align eigenvector signs to the analytic run to compare consistently
        return float(np.sum(w * aw) + np.sum(V * aV))

    t = ad.leaf(S)
    w, V = ad.eigh3(t)
    out = ad.tsum(ad.mul(w, ad.constant(aw))) + ad.tsum(ad.mul(V, ad.constant(aV)))
    out.backward()

    # FD must perturb symmetrically to stay on the symmetric manifold
    eps = 1e-7
    num = np.zeros_like(S)
    for n in range(S.shape[0]):
        for i in range(3):
            for j in range(i, 3):
                Sp = S.copy()
                Sp[n, i, j] += eps
                Sp[n, j, i] = Sp[n, i, j] if i != j else Sp[n, i, j]
                Sm = S.copy()
                Sm[n, i, j] -= eps
                Sm[n, j, i] = Sm[n, i, j] if i != j else Sm[n, i, j]
                d = (value(Sp) - value(Sm)) / (2 * eps)
                if i == j:
                    num[n, i, i] = d
                else:
                    num[n, i, j] = d / 2.0
                    num[n, j, i] = d / 2.0
    np.testing.assert_allclose(t.grad, num, atol=5e-5, rtol=5e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_jacobi_reconstruction_property(seed):
    rng = np.random.default_rng(seed)
    S = random_spd(rng, 8, spread=rng.uniform(0.1, 10.0))
    w, V = ad.jacobi_eigh3(S)
    recon = np.einsum("...ij,...j,...kj->...ik", V, w, V)
    np.testing.assert_allclose(recon, S, atol=1e-9 * max(1.0, np.abs(S).max()))
    # V is a proper rotation
    np.testing.assert_allclose(
        np.einsum("...ij,...ik->...jk", V, V), np.broadcast_to(np.eye(3), V.shape),
        atol=1e-12,
    )
