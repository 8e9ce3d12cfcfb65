"""Cascaded cluster deformation with covariance propagation.

A single layer maps a point x belonging to cluster j (centroid p_c) to

    x_d = p_c + sigma(x) * (R (x - p_c) + t),
    sigma(x) = tanh(c . (x - p_c) + s) + 1   in (0, 2),

so zero parameters (R = I, t = 0, c = 0, s = 0) give the identity map. The
spatial Jacobian is analytic:

    dx_d/dx = sigma * R + (R (x - p_c) + t) (sigma' c^T),  sigma' = 1 - tanh^2.

K layers (coarsest first) compose; the accumulated Jacobian J = J_K ... J_1
pushes each Gaussian's covariance forward as J Sigma J^T, which is factored
back into (orientation, scale). Per-Gaussian deltas are applied afterwards:
center shift adds, orientation delta left-multiplies, log-scale delta adds.

The covariance factorization inside the cascade is gauge-continuous: the
eigenbasis is expressed relative to the rotation polar(J) * R_prev and rounded
to it through a signed permutation, so under a rigid J every orientation
simply co-rotates instead of snapping to a sorted-eigenvalue convention. The
reference rotation and permutation only fix the gauge — the factored output
as a function of the covariance is invariant to them — so treating them as
constants of the backward pass leaves gradients exact.

An `anchored=False` switch drops the leading p_c term (the map is then not an
identity at zero parameters; kept for comparison experiments).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry
from .core import GaussianSet
from .tapemath import mat_to_quat_t, quat_multiply_t, quat_normalize_t, quat_to_mat_t

_IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
_PD_FLOOR = 1e-12


@dataclass
class ClusterDeformParams:
    """One cluster's deformation: rotation, translation, and the scaling field."""

    rotation: np.ndarray  # (4,) unit quaternion
    translation: np.ndarray  # (3,)
    scale_dir: np.ndarray  # (3,) direction of the scaling-factor gradient
    scale_bias: float  # scalar offset inside the tanh

    @classmethod
    def zero(cls):
        return cls(
            rotation=_IDENTITY_QUAT.copy(),
            translation=np.zeros(3),
            scale_dir=np.zeros(3),
            scale_bias=0.0,
        )


@dataclass
class PerGaussianDelta:
    """Per-Gaussian refinement applied after the cluster cascade."""

    d_center: np.ndarray  # (3,)
    d_rotation: np.ndarray  # (4,) unit quaternion, left-multiplies
    d_log_scale: np.ndarray  # (3,) additive in log-scale space

    @classmethod
    def zero(cls):
        return cls(
            d_center=np.zeros(3),
            d_rotation=_IDENTITY_QUAT.copy(),
            d_log_scale=np.zeros(3),
        )


@dataclass
class DeformLayer:
    """Struct-of-arrays parameters for every cluster of one layer."""

    rotations: np.ndarray  # (L, 4)
    translations: np.ndarray  # (L, 3)
    scale_dirs: np.ndarray  # (L, 3)
    scale_biases: np.ndarray  # (L,)

    @classmethod
    def zero(cls, size):
        return cls(
            rotations=np.tile(_IDENTITY_QUAT, (size, 1)),
            translations=np.zeros((size, 3)),
            scale_dirs=np.zeros((size, 3)),
            scale_biases=np.zeros(size),
        )

    @property
    def size(self):
        return self.rotations.shape[0]

    def params(self, j):
        return ClusterDeformParams(
            rotation=self.rotations[j].copy(),
            translation=self.translations[j].copy(),
            scale_dir=self.scale_dirs[j].copy(),
            scale_bias=float(self.scale_biases[j]),
        )

    def is_zero(self):
        return (
            np.array_equal(self.rotations, np.tile(_IDENTITY_QUAT, (self.size, 1)))
            and not self.translations.any()
            and not self.scale_dirs.any()
            and not self.scale_biases.any()
        )


@dataclass
class CascadeDeform:
    """K cluster layers (coarsest first) plus per-Gaussian deltas."""

    layers: list  # list[DeformLayer]
    d_centers: np.ndarray  # (N, 3)
    d_rotations: np.ndarray  # (N, 4)
    d_log_scales: np.ndarray  # (N, 3)
    hierarchy: object  # ClusterHierarchy this cascade is bound to
    anchored: bool = True

    def __post_init__(self):
        sizes = tuple(layer.size for layer in self.layers)
        if sizes != tuple(self.hierarchy.layer_sizes):
            raise ValueError(
                f"layer sizes {sizes} do not match hierarchy {tuple(self.hierarchy.layer_sizes)}"
            )

    @property
    def n(self):
        return self.d_centers.shape[0]

    def delta(self, i):
        return PerGaussianDelta(
            d_center=self.d_centers[i].copy(),
            d_rotation=self.d_rotations[i].copy(),
            d_log_scale=self.d_log_scales[i].copy(),
        )

    def is_zero(self):
        return (
            all(layer.is_zero() for layer in self.layers)
            and not self.d_centers.any()
            and np.array_equal(self.d_rotations, np.tile(_IDENTITY_QUAT, (self.n, 1)))
            and not self.d_log_scales.any()
        )

    def parameter_count(self):
        """Total number of scalar parameters (11 per cluster, 10 per Gaussian)."""
        return sum(11 * layer.size for layer in self.layers) + 10 * self.n

    def copy(self):
        return CascadeDeform(
            layers=[
                DeformLayer(
                    rotations=l.rotations.copy(),
                    translations=l.translations.copy(),
                    scale_dirs=l.scale_dirs.copy(),
                    scale_biases=l.scale_biases.copy(),
                )
                for l in self.layers
            ],
            d_centers=self.d_centers.copy(),
            d_rotations=self.d_rotations.copy(),
            d_log_scales=self.d_log_scales.copy(),
            hierarchy=self.hierarchy,
            anchored=self.anchored,
        )


def cascade_zero(hierarchy, n_gaussians, anchored=True):
    """Identity cascade bound to `hierarchy` (fixed point of cascade_apply)."""
    return CascadeDeform(
        layers=[DeformLayer.zero(size) for size in hierarchy.layer_sizes],
        d_centers=np.zeros((n_gaussians, 3)),
        d_rotations=np.tile(_IDENTITY_QUAT, (n_gaussians, 1)),
        d_log_scales=np.zeros((n_gaussians, 3)),
        hierarchy=hierarchy,
        anchored=anchored,
    )


# ---------------------------------------------------------------------------
# single-layer reference implementations (plain numpy)


def scaling_factor(params, centroid, x):
    """sigma(x) = tanh(c . (x - p_c) + s) + 1, always in (0, 2)."""
    x = np.asarray(x, dtype=np.float64)
    d = x - np.asarray(centroid, dtype=np.float64)
    u = d @ np.asarray(params.scale_dir, dtype=np.float64) + params.scale_bias
    return np.tanh(u) + 1.0


def layer_apply(params, centroid, x, anchored=True):
    """Apply one cluster deformation to point(s) x of shape (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    centroid = np.asarray(centroid, dtype=np.float64)
    d = x - centroid
    R = geometry.quat_to_matrix(params.rotation)
    moved = d @ R.T + params.translation
    sig = scaling_factor(params, centroid, x)
    if anchored:
        return x + (sig[..., None] * moved - d)
    return sig[..., None] * moved


def layer_jacobian(params, centroid, x):
    """Spatial Jacobian of layer_apply at x; identical for both anchor modes."""
    x = np.asarray(x, dtype=np.float64)
    centroid = np.asarray(centroid, dtype=np.float64)
    d = x - centroid
    R = geometry.quat_to_matrix(params.rotation)
    moved = d @ R.T + params.translation
    u = d @ np.asarray(params.scale_dir, dtype=np.float64) + params.scale_bias
    th = np.tanh(u)
    sig = th + 1.0
    sigp = 1.0 - th * th
    return sig[..., None, None] * R + np.einsum(
        "...i,...j->...ij", moved, sigp[..., None] * np.broadcast_to(params.scale_dir, x.shape)
    )


# ---------------------------------------------------------------------------
# batched 3x3 polar rotation (Newton iteration, SVD fallback)


def _inv3(A):
    c0 = np.cross(A[..., :, 1], A[..., :, 2], axis=-1)
    c1 = np.cross(A[..., :, 2], A[..., :, 0], axis=-1)
    c2 = np.cross(A[..., :, 0], A[..., :, 1], axis=-1)
    det = np.einsum("...i,...i->...", A[..., :, 0], c0)
    inv = np.stack([c0, c1, c2], axis=-2) / det[..., None, None]
    return inv, det


def _polar_rotation_batch(J):
    """Rotation nearest to each J (det forced to +1), via Newton iteration."""
    X = np.asarray(J, dtype=np.float64).copy()
    done = np.zeros(X.shape[:-2], dtype=bool)
    for _ in range(20):
        # 0/0 for singular entries is handled by the `bad` mask below
        with np.errstate(invalid="ignore", divide="ignore"):
            inv, det = _inv3(X)
        bad = np.abs(det) < 1e-30
        if np.any(bad & ~done):
            # singular: replace with identity; caller rejects these via the
            # positive-definiteness check on the propagated covariance
            X[bad & ~done] = np.eye(3)
            done |= bad
        Xn = 0.5 * (X + np.swapaxes(inv, -1, -2))
        X = np.where(done[..., None, None], X, Xn)
        res = np.abs(np.einsum("...ki,...kj->...ij", X, X) - np.eye(3)).max(axis=(-1, -2))
        done |= res < 1e-12
        if np.all(done):
            break
    det = np.linalg.det(X)
    flip = det < 0.0
    if np.any(flip):
        X = X.copy()
        X[flip, :, 2] *= -1.0
    return X


def _nearest_signed_permutation(V):
    """Signed permutation P with V @ P closest to the identity, det(P) = +1.

    Greedy on |V| (largest entries first); if the resulting permutation is
    odd, the weakest chosen entry flips sign to restore det +1.
    """
    V = np.asarray(V, dtype=np.float64)
    n = V.shape[0]
    work = np.abs(V).copy()
    P = np.zeros_like(V)
    batch = np.arange(n)
    last_i = last_j = None
    for _ in range(3):
        flat = work.reshape(n, 9).argmax(axis=1)
        i, j = np.divmod(flat, 3)
        # V's entry (i, j) dominant -> P maps output axis j back to input axis i
        P[batch, j, i] = np.where(V[batch, i, j] >= 0.0, 1.0, -1.0)
        work[batch, i, :] = -1.0
        work[batch, :, j] = -1.0
        last_i, last_j = i, j
    det = np.linalg.det(P)
    neg = det < 0.0
    if np.any(neg):
        P[batch[neg], last_j[neg], last_i[neg]] *= -1.0
    return P


# ---------------------------------------------------------------------------
# cascade forward (traced)


@dataclass
class CascadeTrace:
    """Tape handles for one cascade application."""

    centers: ad.Tensor  # (N, 3)
    orientations: ad.Tensor  # (N, 4)
    scales: ad.Tensor  # (N, 3)
    jacobians: ad.Tensor  # (N, 3, 3) accumulated spatial Jacobian
    covariances: ad.Tensor  # (N, 3, 3) propagated, exactly symmetric; None if off
    leaves: dict  # parameter name -> leaf Tensor


def trace_cascade(cascade, gset, propagate_covariance=True, differentiable=True):
    """Run the cascade on `gset`, building the autodiff graph.

    With differentiable=False the same code path runs on constants (no graph),
    which keeps the evaluation and training forwards numerically identical.
    """
    hier = cascade.hierarchy
    n = gset.n
    mk = ad.leaf if differentiable else ad.constant
    leaves = {}

    x = ad.constant(gset.centers)
    J = None
    for k, layer in enumerate(cascade.layers):
        rot = mk(layer.rotations)
        tra = mk(layer.translations)
        cdir = mk(layer.scale_dirs)
        sbias = mk(layer.scale_biases)
        leaves[f"layer{k}.rotations"] = rot
        leaves[f"layer{k}.translations"] = tra
        leaves[f"layer{k}.scale_dirs"] = cdir
        leaves[f"layer{k}.scale_biases"] = sbias

        cid = hier.assignments[k]
        q = ad.gather(quat_normalize_t(rot), cid)  # (N, 4)
        R = quat_to_mat_t(q)  # (N, 3, 3)
        t = ad.gather(tra, cid)
        c = ad.gather(cdir, cid)
        s = ad.gather(sbias, cid)
        pc = ad.constant(hier.centroids[k][cid])

        d = x - pc
        u = ad.tsum(ad.mul(c, d), axis=-1) + s  # (N,)
        th = ad.tanh(u)
        sig = th + 1.0
        moved = ad.matvec(R, d) + t
        scaled = ad.mul(moved, ad.reshape(sig, (n, 1)))
        if cascade.anchored:
            # written as x + (sigma*moved - d) so the zero cascade is an
            # exact identity in floating point
            x = x + (scaled - d)
        else:
            x = scaled
        sigp = 1.0 - ad.mul(th, th)
        Jk = ad.mul(R, ad.reshape(sig, (n, 1, 1))) + ad.outer(
            moved, ad.mul(c, ad.reshape(sigp, (n, 1)))
        )
        J = Jk if J is None else ad.matmul(Jk, J)

    d_centers = mk(cascade.d_centers)
    d_rotations = mk(cascade.d_rotations)
    d_log_scales = mk(cascade.d_log_scales)
    leaves["d_centers"] = d_centers
    leaves["d_rotations"] = d_rotations
    leaves["d_log_scales"] = d_log_scales

    centers_out = x + d_centers

    cov = None
    if propagate_covariance:
        prev_R = geometry.quat_to_matrix(gset.orientations)
        A0 = ad.constant(prev_R * gset.scales[:, None, :])  # R_prev diag(s_prev)
        A = ad.matmul(J, A0)
        M = ad.matmul(A, ad.transpose_last2(A))
        M = ad.mul(M + ad.transpose_last2(M), 0.5)  # bitwise-exact symmetry
        cov = M

        # gauge reference: constants of the backward pass (see module docstring)
        Q = _polar_rotation_batch(J.value) @ prev_R
        B = ad.matmul(ad.matmul(ad.constant(np.swapaxes(Q, -1, -2)), M), ad.constant(Q))
        B = ad.mul(B + ad.transpose_last2(B), 0.5)
        evals, evecs = ad.eigh3(B)
        if np.any(evals.value <= _PD_FLOOR):
            idx = int(np.argmax(np.min(evals.value, axis=-1) <= _PD_FLOOR))
            raise ValueError(
                f"propagated covariance is not positive definite for Gaussian {idx}"
                " (degenerate deformation Jacobian)"
            )
        P = _nearest_signed_permutation(evecs.value)
        R_dec = ad.matmul(ad.constant(Q), ad.matmul(evecs, ad.constant(P)))
        perm = np.abs(np.swapaxes(P, -1, -2))
        scales_prop = ad.sqrt(ad.matvec(ad.constant(perm), evals))
        q_prop = mat_to_quat_t(R_dec)
    else:
        q_prop = ad.constant(gset.orientations)
        scales_prop = ad.constant(gset.scales)

    dq = quat_normalize_t(d_rotations)
    orientations_out = quat_normalize_t(quat_multiply_t(dq, q_prop))
    scales_out = ad.mul(scales_prop, ad.exp(d_log_scales))

    return CascadeTrace(
        centers=centers_out,
        orientations=orientations_out,
        scales=scales_out,
        jacobians=J,
        covariances=cov,
        leaves=leaves,
    )


def cascade_apply(cascade, gset, propagate_covariance=True):
    """Deform a GaussianSet; returns a new set with frame_index + 1.

    The all-zero cascade short-circuits to an exact copy (identity map).
    """
    if cascade.is_zero():
        out = gset.copy()
        out.frame_index = gset.frame_index + 1
        return out
    trace = trace_cascade(
        cascade, gset, propagate_covariance=propagate_covariance, differentiable=False
    )
    return GaussianSet(
        centers=trace.centers.value,
        orientations=trace.orientations.value,
        scales=trace.scales.value,
        colors=gset.colors.copy(),
        frame_index=gset.frame_index + 1,
    )


def cascade_jacobians(cascade, gset):
    """Accumulated spatial Jacobian J = J_K ... J_1 per Gaussian, (N, 3, 3)."""
    trace = trace_cascade(cascade, gset, propagate_covariance=False, differentiable=False)
    return trace.jacobians.value


def propagated_covariances(cascade, gset):
    """J Sigma J^T per Gaussian (exactly symmetric), without the refactoring."""
    trace = trace_cascade(cascade, gset, propagate_covariance=True, differentiable=False)
    return trace.covariances.value


# ---------------------------------------------------------------------------
# serialization (bit-exact via hex floats)


def _arr_to_hex(a):
    return {"shape": list(a.shape), "data": [float(v).hex() for v in a.ravel()]}


def _arr_from_hex(payload):
    data = np.array([float.fromhex(v) for v in payload["data"]], dtype=np.float64)
    return data.reshape(payload["shape"])


def cascade_to_payload(cascade):
    return {
        "anchored": bool(cascade.anchored),
        "layers": [
            {
                "rotations": _arr_to_hex(l.rotations),
                "translations": _arr_to_hex(l.translations),
                "scale_dirs": _arr_to_hex(l.scale_dirs),
                "scale_biases": _arr_to_hex(l.scale_biases),
            }
            for l in cascade.layers
        ],
        "d_centers": _arr_to_hex(cascade.d_centers),
        "d_rotations": _arr_to_hex(cascade.d_rotations),
        "d_log_scales": _arr_to_hex(cascade.d_log_scales),
    }


def cascade_from_payload(payload, hierarchy):
    return CascadeDeform(
        layers=[
            DeformLayer(
                rotations=_arr_from_hex(l["rotations"]),
                translations=_arr_from_hex(l["translations"]),
                scale_dirs=_arr_from_hex(l["scale_dirs"]),
                scale_biases=_arr_from_hex(l["scale_biases"]),
            )
            for l in payload["layers"]
        ],
        d_centers=_arr_from_hex(payload["d_centers"]),
        d_rotations=_arr_from_hex(payload["d_rotations"]),
        d_log_scales=_arr_from_hex(payload["d_log_scales"]),
        hierarchy=hierarchy,
        anchored=bool(payload["anchored"]),
    )
