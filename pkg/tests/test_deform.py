"""The layered deformation map, its Jacobians, and covariance propagation.

Oracles: central finite differences for every Jacobian claim, direct rigid
transformation of (centers, orientations, covariances) for the pure-rotation
case, and the analytic composition law for stacked single-cluster layers.
"""

import numpy as np
import pytest

from gscascade import autodiff as ad
from gscascade import geometry
from gscascade.clustering import build_hierarchy
from gscascade.core import GaussianSet
from gscascade.deform import (
    CascadeDeform,
    ClusterDeformParams,
    DeformLayer,
    cascade_apply,
    cascade_from_payload,
    cascade_jacobians,
    cascade_to_payload,
    cascade_zero,
    layer_apply,
    layer_jacobian,
    propagated_covariances,
    scaling_factor,
    trace_cascade,
)


def random_set(rng, n=40, spread=1.0):
    return GaussianSet(
        centers=rng.normal(size=(n, 3)) * spread,
        orientations=rng.normal(size=(n, 4)),
        scales=rng.uniform(0.01, 0.05, size=(n, 3)),
    )


def random_cascade(rng, gset, sizes=(2, 5, 12), mag=0.1, anchored=True):
    h = build_hierarchy(gset.centers, sizes, seed=0)
    casc = cascade_zero(h, gset.n, anchored=anchored)
    for layer in casc.layers:
        layer.rotations = layer.rotations + rng.normal(scale=mag, size=layer.rotations.shape)
        layer.translations = rng.normal(scale=mag * 0.2, size=layer.translations.shape)
        layer.scale_dirs = rng.normal(scale=mag, size=layer.scale_dirs.shape)
        layer.scale_biases = rng.normal(scale=mag, size=layer.scale_biases.shape)
    return casc


def random_params(rng, mag=0.3):
    return ClusterDeformParams(
        rotation=geometry.quat_normalize(rng.normal(size=4)),
        translation=rng.normal(size=3) * mag,
        scale_dir=rng.normal(size=3) * mag,
        scale_bias=float(rng.normal() * mag),
    )


# ---------------------------------------------------------------------------
# single layer


def test_scaling_factor_range_and_centroid_value():
    rng = np.random.default_rng(0)
    params = random_params(rng, mag=2.0)
    x = rng.normal(size=(200, 3)) * 3.0
    pc = np.array([0.2, -0.1, 0.4])
    sig = scaling_factor(params, pc, x)
    # mathematically in (0, 2); float tanh saturates to the closed endpoints
    assert np.all(sig >= 0.0) and np.all(sig <= 2.0)
    mild = np.abs((x - pc) @ params.scale_dir + params.scale_bias) < 5.0
    assert np.all(sig[mild] > 0.0) and np.all(sig[mild] < 2.0)
    # at the centroid the offset vanishes: sigma = tanh(bias) + 1
    at_pc = scaling_factor(params, pc, pc[None])
    np.testing.assert_allclose(at_pc, np.tanh(params.scale_bias) + 1.0, atol=1e-15)


def test_layer_apply_identity_at_zero_params():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 3))
    out = layer_apply(ClusterDeformParams.zero(), x.mean(axis=0), x)
    np.testing.assert_array_equal(out, x)


def test_layer_apply_anchored_vs_plain_form():
    # with sigma == 1 (zero scaling field) and a rigid (R, t):
    #   plain    = R(x - pc) + t
    #   anchored = x + (R(x - pc) + t - (x - pc)) = pc + R(x - pc) + t
    # so the two forms differ by exactly the centroid
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 3))
    pc = np.array([0.3, -0.1, 0.2])
    params = ClusterDeformParams(
        rotation=geometry.quat_normalize(rng.normal(size=4)),
        translation=rng.normal(size=3) * 0.1,
        scale_dir=np.zeros(3),
        scale_bias=0.0,
    )
    anchored = layer_apply(params, pc, x, anchored=True)
    plain = layer_apply(params, pc, x, anchored=False)
    np.testing.assert_allclose(anchored, plain + pc, atol=1e-12)


def test_layer_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(15, 3))
    pc = np.array([0.1, 0.2, -0.3])
    params = random_params(rng)
    J = layer_jacobian(params, pc, x)
    eps = 1e-6
    for i in range(x.shape[0]):
        num = np.zeros((3, 3))
        for d in range(3):
            xp, xm = x[i].copy(), x[i].copy()
            xp[d] += eps
            xm[d] -= eps
            fp = layer_apply(params, pc, xp[None])[0]
            fm = layer_apply(params, pc, xm[None])[0]
            num[:, d] = (fp - fm) / (2 * eps)
        np.testing.assert_allclose(J[i], num, atol=1e-6)


def test_layer_jacobian_pure_rotation_is_rotation_matrix():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(10, 3))
    q = geometry.quat_normalize(rng.normal(size=4))
    params = ClusterDeformParams(
        rotation=q, translation=np.zeros(3), scale_dir=np.zeros(3), scale_bias=0.0
    )
    J = layer_jacobian(params, np.zeros(3), x)
    R = geometry.quat_to_matrix(q)
    np.testing.assert_allclose(J, np.broadcast_to(R, J.shape), atol=1e-12)


# ---------------------------------------------------------------------------
# cascade basics


def test_cascade_zero_is_exact_identity():
    rng = np.random.default_rng(5)
    gset = random_set(rng)
    h = build_hierarchy(gset.centers, (2, 6), seed=0)
    casc = cascade_zero(h, gset.n)
    assert casc.is_zero()
    out = cascade_apply(casc, gset)
    assert out.frame_index == gset.frame_index + 1
    assert np.array_equal(out.centers, gset.centers)
    assert np.array_equal(out.orientations, gset.orientations)
    assert np.array_equal(out.scales, gset.scales)


def test_parameter_count():
    rng = np.random.default_rng(6)
    gset = random_set(rng, n=50)
    h = build_hierarchy(gset.centers, (3, 10), seed=0)
    casc = cascade_zero(h, 50)
    # 11 per cluster (4 rotation + 3 translation + 3 direction + 1 bias),
    # 10 per Gaussian (3 center + 4 rotation + 3 log-scale)
    assert casc.parameter_count() == 11 * 13 + 10 * 50


def test_layer_size_mismatch_rejected():
    rng = np.random.default_rng(60)
    gset = random_set(rng, n=20)
    h = build_hierarchy(gset.centers, (2, 6), seed=0)
    with pytest.raises(ValueError, match="do not match"):
        CascadeDeform(
            layers=[DeformLayer.zero(2), DeformLayer.zero(7)],
            d_centers=np.zeros((20, 3)),
            d_rotations=np.tile([1.0, 0, 0, 0], (20, 1)),
            d_log_scales=np.zeros((20, 3)),
            hierarchy=h,
        )


def test_single_cluster_translation_moves_everything():
    rng = np.random.default_rng(7)
    gset = random_set(rng, n=20)
    h = build_hierarchy(gset.centers, (1,), seed=0)
    casc = cascade_zero(h, 20)
    casc.layers[0].translations[0] = [0.5, -0.25, 1.0]
    out = cascade_apply(casc, gset)
    np.testing.assert_allclose(out.centers, gset.centers + [0.5, -0.25, 1.0], atol=1e-12)
    np.testing.assert_allclose(out.scales, gset.scales, atol=1e-12)
    assert np.max(geometry.quat_distance(out.orientations, gset.orientations)) < 1e-9


def test_global_rotation_co_rotates_centers_orientations_covariances():
    """A coarsest-layer rigid rotation must co-rotate every Gaussian."""
    rng = np.random.default_rng(8)
    gset = random_set(rng, n=25)
    h = build_hierarchy(gset.centers, (1,), seed=0)
    casc = cascade_zero(h, 25)
    q = geometry.quat_normalize(np.array([0.9, 0.2, -0.3, 0.1]))
    casc.layers[0].rotations[0] = q
    out = cascade_apply(casc, gset)

    pc = h.centroids[0][0]
    R = geometry.quat_to_matrix(q)
    d = gset.centers - pc
    np.testing.assert_allclose(out.centers, gset.centers + (d @ R.T - d), atol=1e-12)

    want_q = geometry.quat_multiply(np.broadcast_to(q, (25, 4)), gset.orientations)
    assert np.max(geometry.quat_distance(out.orientations, want_q)) < 1e-7
    want_cov = np.einsum("ij,njk,lk->nil", R, gset.covariances(), R)
    np.testing.assert_allclose(out.covariances(), want_cov, atol=1e-9)
    np.testing.assert_allclose(np.sort(out.scales, -1), np.sort(gset.scales, -1), atol=1e-9)


def test_stacked_rotations_compose():
    """Single-cluster layers share one frozen centroid, so pure rotations
    compose into their matrix product."""
    rng = np.random.default_rng(9)
    n = 30
    gset = GaussianSet(
        centers=rng.normal(size=(n, 3)) * 0.3,
        orientations=rng.normal(size=(n, 4)),
        scales=rng.uniform(0.01, 0.04, size=(n, 3)),
    )
    h = build_hierarchy(gset.centers, (1, 1, 1), seed=0)
    casc = cascade_zero(h, n)
    qs = [geometry.quat_normalize(rng.normal(size=4)) for _ in range(3)]
    for k, q in enumerate(qs):
        casc.layers[k].rotations[0] = q
    out = cascade_apply(casc, gset)
    composed = geometry.quat_multiply(qs[2], geometry.quat_multiply(qs[1], qs[0]))
    want_q = geometry.quat_multiply(np.broadcast_to(composed, (n, 4)), gset.orientations)
    assert np.max(geometry.quat_distance(out.orientations, want_q)) < 1e-7
    np.testing.assert_allclose(np.sort(out.scales, -1), np.sort(gset.scales, -1), atol=1e-7)
    J = cascade_jacobians(casc, gset)
    Rc = geometry.quat_to_matrix(composed)
    np.testing.assert_allclose(J, np.broadcast_to(Rc, J.shape), atol=1e-12)


def test_per_gaussian_deltas_apply_after_cascade():
    rng = np.random.default_rng(10)
    gset = random_set(rng, n=12)
    h = build_hierarchy(gset.centers, (1,), seed=0)
    casc = cascade_zero(h, 12)
    casc.d_centers = rng.normal(scale=0.01, size=(12, 3))
    dq = geometry.quat_normalize(
        np.concatenate([np.ones((12, 1)), rng.normal(scale=0.05, size=(12, 3))], axis=1)
    )
    casc.d_rotations = dq
    casc.d_log_scales = rng.normal(scale=0.1, size=(12, 3))
    out = cascade_apply(casc, gset)
    np.testing.assert_allclose(out.centers, gset.centers + casc.d_centers, atol=1e-12)
    want_q = geometry.quat_multiply(dq, gset.orientations)
    assert np.max(geometry.quat_distance(out.orientations, want_q)) < 1e-9
    np.testing.assert_allclose(out.scales, gset.scales * np.exp(casc.d_log_scales), atol=1e-12)


# ---------------------------------------------------------------------------
# cascade Jacobians and covariance propagation


def test_cascade_jacobian_matches_finite_differences():
    rng = np.random.default_rng(11)
    gset = random_set(rng, n=20)
    casc = random_cascade(rng, gset, sizes=(2, 6), mag=0.15)
    J = cascade_jacobians(casc, gset)
    eps = 1e-6

    def forward(x_all):
        probe = GaussianSet(centers=x_all, orientations=gset.orientations, scales=gset.scales)
        tr = trace_cascade(casc, probe, propagate_covariance=False, differentiable=False)
        return tr.centers.value

    # cluster assignments are frozen in the hierarchy, so probing nearby
    # positions differentiates the same smooth map
    for i in rng.choice(gset.n, size=6, replace=False):
        num = np.zeros((3, 3))
        for d in range(3):
            xp = gset.centers.copy()
            xm = gset.centers.copy()
            xp[i, d] += eps
            xm[i, d] -= eps
            num[:, d] = (forward(xp)[i] - forward(xm)[i]) / (2 * eps)
        np.testing.assert_allclose(J[i], num, atol=1e-5)


def test_propagated_covariances_exactly_symmetric_and_pd():
    rng = np.random.default_rng(12)
    gset = random_set(rng, n=200)
    casc = random_cascade(rng, gset, sizes=(3, 10, 30), mag=0.2)
    cov = propagated_covariances(casc, gset)
    assert np.array_equal(cov, np.swapaxes(cov, -1, -2))
    assert np.all(np.linalg.eigvalsh(cov) > 0.0)
    # oracle: J Sigma J^T from the independently computed Jacobians
    J = cascade_jacobians(casc, gset)
    want = np.einsum("nij,njk,nlk->nil", J, gset.covariances(), J)
    np.testing.assert_allclose(cov, want, atol=1e-12)


def test_decomposed_state_recomposes_to_propagated_covariance():
    rng = np.random.default_rng(13)
    gset = random_set(rng, n=60)
    casc = random_cascade(rng, gset, sizes=(2, 8), mag=0.25)
    out = cascade_apply(casc, gset)
    want = propagated_covariances(casc, gset)
    got = out.covariances()
    assert np.abs(got - want).max() < 1e-7 * max(1.0, np.abs(want).max())


def test_degenerate_jacobian_raises():
    rng = np.random.default_rng(14)
    gset = random_set(rng, n=10)
    h = build_hierarchy(gset.centers, (1,), seed=0)
    casc = cascade_zero(h, 10)
    # saturate the tanh so sigma == 0: the map collapses and J is singular
    casc.layers[0].scale_biases[0] = -60.0
    with pytest.raises(ValueError, match="positive definite"):
        cascade_apply(casc, gset)


def test_anchor_flag_shifts_centers_not_jacobians():
    rng = np.random.default_rng(15)
    gset = random_set(rng, n=16)
    casc_a = random_cascade(rng, gset, sizes=(3,), mag=0.1, anchored=True)
    casc_u = casc_a.copy()
    casc_u.anchored = False
    out_a = cascade_apply(casc_a, gset)
    out_u = cascade_apply(casc_u, gset)
    assert not np.allclose(out_a.centers, out_u.centers)
    # a single layer's Jacobian is evaluated at the same input either way
    np.testing.assert_allclose(
        cascade_jacobians(casc_a, gset), cascade_jacobians(casc_u, gset), atol=1e-15
    )


def test_payload_roundtrip_bit_exact():
    rng = np.random.default_rng(16)
    gset = random_set(rng, n=14)
    casc = random_cascade(rng, gset, sizes=(2, 5), mag=0.3)
    casc.d_centers = rng.normal(scale=0.01, size=(14, 3))
    back = cascade_from_payload(cascade_to_payload(casc), casc.hierarchy)
    for la, lb in zip(casc.layers, back.layers):
        assert np.array_equal(la.rotations, lb.rotations)
        assert np.array_equal(la.translations, lb.translations)
        assert np.array_equal(la.scale_dirs, lb.scale_dirs)
        assert np.array_equal(la.scale_biases, lb.scale_biases)
    assert np.array_equal(casc.d_centers, back.d_centers)
    assert np.array_equal(casc.d_rotations, back.d_rotations)
    assert np.array_equal(casc.d_log_scales, back.d_log_scales)
    assert back.anchored == casc.anchored
    out_a = cascade_apply(casc, gset)
    out_b = cascade_apply(back, gset)
    assert np.array_equal(out_a.centers, out_b.centers)


def test_trace_gradients_flow_at_zero_parameters():
    """Every frame's fit starts from the zero cascade; gradients there must
    be live for all parameter groups."""
    rng = np.random.default_rng(17)
    gset = random_set(rng, n=15)
    h = build_hierarchy(gset.centers, (2, 5), seed=0)
    casc = cascade_zero(h, 15)
    tr = trace_cascade(casc, gset)
    loss = ad.tsum(ad.square(tr.centers - ad.constant(gset.centers + 0.01)))
    loss = loss + ad.tsum(ad.square(tr.scales))
    loss.backward()
    for name in ("layer0.translations", "layer0.rotations", "layer0.scale_biases", "d_centers"):
        g = tr.leaves[name].grad
        assert g is not None and np.abs(g).max() > 0.0, name
