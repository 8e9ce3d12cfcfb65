"""Training objectives and their gradients.

Five terms, all reduced as means so weights are comparable across scene sizes:

  * scale hinge: per-axis max(0, scale - max_scale), averaged over Gaussians;
  * local rigidity: neighbor displacements should co-rotate with the Gaussian
    (prev-frame vs current-frame offsets compared in the rotated frame);
  * isometry: neighbor distances should match frame 0;
  * rotation: neighboring Gaussians should undergo similar frame-to-frame
    rotations (quaternion increments compared after sign alignment);
  * data: squared distance to observed points, matched by correspondence when
    available, else symmetric nearest-neighbor (Chamfer) distance.

The rigidity/rotation neighborhood is a frozen k-NN graph built from frame-0
centers with Gaussian falloff weights exp(-lambda * d^2).

Everything routes through the autodiff tape, so `total_loss` returns exact
gradients for every cascade parameter (including through covariance
propagation). Norms use a small floor so the null cases (current == previous)
produce zero gradients instead of NaNs; nearest-neighbor matches and
quaternion sign alignments are taken from forward values and held constant
during the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import geometry
from .deform import trace_cascade
from .tapemath import quat_multiply_t, quat_to_mat_t, safe_norm

DEFAULT_NEIGHBOR_COUNT = 20
DEFAULT_LAMBDA_SCALE = 2000.0  # lambda_weight = 2000 / scene_scale**2


@dataclass
class LossWeights:
    """Weights for (rigidity, isometry, rotation, scale, data)."""

    w_rigid: float = 0.19
    w_iso: float = 0.10
    w_rot: float = 0.19
    w_scale: float = 0.48
    w_data: float = 1.0

    def __post_init__(self):
        for name in ("w_rigid", "w_iso", "w_rot", "w_scale", "w_data"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class NeighborGraph:
    """Frozen k-nearest-neighbor graph with Gaussian falloff weights."""

    indices: np.ndarray  # (N, k) neighbor Gaussian indices
    weights: np.ndarray  # (N, k) in (0, 1]
    lambda_weight: float

    @property
    def k(self):
        return self.indices.shape[1]


def build_neighbor_graph(centers, k=DEFAULT_NEIGHBOR_COUNT, lambda_weight=None,
                         scene_scale=1.0, workers=1):
    """k nearest neighbors (self excluded) of each center, plus edge weights."""
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    if lambda_weight is None:
        lambda_weight = DEFAULT_LAMBDA_SCALE / scene_scale**2
    tree = cKDTree(centers)
    _, idx = tree.query(centers, k=k + 1, workers=workers)
    # drop each point's own row (usually among the k+1 results; ties could put
    # it anywhere, so filter by identity rather than assuming column 0)
    keep = idx != np.arange(n)[:, None]
    excess = keep.sum(axis=1) - k  # 1 when duplicates crowded self out of the results
    for i in np.nonzero(excess > 0)[0]:
        kept_cols = np.nonzero(keep[i])[0]
        keep[i, kept_cols[-1]] = False  # drop the farthest
    neighbors = idx[keep].reshape(n, k)
    d2 = np.sum((centers[neighbors] - centers[:, None, :]) ** 2, axis=-1)
    return NeighborGraph(
        indices=neighbors.astype(np.int64),
        weights=np.exp(-lambda_weight * d2),
        lambda_weight=float(lambda_weight),
    )


@dataclass
class DataObservation:
    """One frame's observed 3D points, optionally index-matched to Gaussians."""

    points: np.ndarray  # (M, 3)
    correspondence: np.ndarray = None  # (M,) Gaussian index per observed point

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (M, 3), got {self.points.shape}")
        if self.points.shape[0] == 0:
            raise ValueError("observation is empty")
        if self.correspondence is not None:
            self.correspondence = np.ascontiguousarray(self.correspondence, dtype=np.int64)
            if self.correspondence.shape != (self.points.shape[0],):
                raise ValueError("correspondence must have one Gaussian index per point")


# ---------------------------------------------------------------------------
# tape kernels (operate on Tensors; constants passed as numpy)


def scale_loss_t(scales_t, max_scale):
    n = scales_t.shape[0]
    return ad.mul(ad.tsum(ad.relu(scales_t - max_scale)), 1.0 / n)


def rigidity_loss_t(prev_set, centers_t, orientations_t, graph):
    n = prev_set.n
    idx = graph.indices
    rot_prev = geometry.quat_to_matrix(prev_set.orientations)  # constant
    rot_curr = quat_to_mat_t(orientations_t)
    # R_prev R_curr^-1 maps current-frame offsets back to the previous frame
    rel = ad.matmul(ad.constant(rot_prev), ad.transpose_last2(rot_curr))
    d_prev = prev_set.centers[idx] - prev_set.centers[:, None, :]  # constant (N,k,3)
    d_curr = ad.gather(centers_t, idx) - ad.reshape(centers_t, (n, 1, 3))
    pred = ad.matvec(ad.reshape(rel, (n, 1, 3, 3)), d_curr)
    per_edge = safe_norm(ad.constant(d_prev) - pred)
    return ad.tmean(ad.mul(ad.constant(graph.weights), per_edge))


def isometry_loss_t(frame0_centers, centers_t, graph):
    n = centers_t.shape[0]
    idx = graph.indices
    # mirror safe_norm's formula bit-for-bit so unmoved centers give
    # d0 - dt == 0.0 exactly and the absval subgradient is 0, not fp noise
    diff0 = frame0_centers[idx] - frame0_centers[:, None, :]
    d0 = np.sqrt(np.maximum(np.sum(diff0 * diff0, axis=-1), 1e-24))
    dt = safe_norm(ad.gather(centers_t, idx) - ad.reshape(centers_t, (n, 1, 3)))
    return ad.tmean(ad.absval(ad.constant(d0) - dt))


def rotation_loss_t(prev_set, orientations_t, graph):
    n = prev_set.n
    idx = graph.indices
    prev_inv = geometry.quat_conjugate(geometry.quat_normalize(prev_set.orientations))
    rel = quat_multiply_t(orientations_t, ad.constant(prev_inv))  # (N, 4) increments
    rel_j = ad.gather(rel, idx)  # (N, k, 4)
    rel_i = ad.reshape(rel, (n, 1, 4))
    # q and -q are the same rotation: align signs before differencing
    dots = np.sum(rel_j.value * rel_i.value, axis=-1)
    signs = np.where(dots < 0.0, -1.0, 1.0)[..., None]
    per_edge = safe_norm(ad.mul(rel_j, ad.constant(signs)) - rel_i)
    return ad.tmean(ad.mul(ad.constant(graph.weights), per_edge))


def data_loss_t(centers_t, obs, workers=1):
    if obs.correspondence is not None:
        matched = ad.gather(centers_t, obs.correspondence)
        return ad.tmean(ad.tsum(ad.square(matched - ad.constant(obs.points)), axis=-1))
    # symmetric Chamfer on squared distances; NN matches fixed from forward
    centers = centers_t.value
    nn_c = cKDTree(obs.points).query(centers, workers=workers)[1]
    nn_o = cKDTree(centers).query(obs.points, workers=workers)[1]
    to_obs = ad.tmean(ad.tsum(ad.square(centers_t - ad.constant(obs.points[nn_c])), axis=-1))
    to_set = ad.tmean(
        ad.tsum(ad.square(ad.gather(centers_t, nn_o) - ad.constant(obs.points)), axis=-1)
    )
    return ad.mul(to_obs + to_set, 0.5)


# ---------------------------------------------------------------------------
# plain evaluation wrappers (value + gradient w.r.t. direct state arrays)


def scale_loss(gset, max_scale):
    """Hinge value and its (N, 3) gradient w.r.t. scales."""
    if max_scale <= 0.0:
        raise ValueError("max_scale must be positive")
    over = gset.scales - max_scale
    mask = over > 0.0
    value = float(np.where(mask, over, 0.0).sum() / gset.n)
    return value, mask.astype(np.float64) / gset.n


def _eval_with_grads(build, leaves):
    loss = build()
    loss.backward()
    grads = {
        name: (np.zeros_like(t.value) if t.grad is None else t.grad) for name, t in leaves.items()
    }
    return float(loss.value), grads


def rigidity_loss(prev_set, curr_set, graph):
    c = ad.leaf(curr_set.centers)
    q = ad.leaf(curr_set.orientations)
    value, grads = _eval_with_grads(
        lambda: rigidity_loss_t(prev_set, c, q, graph), {"centers": c, "orientations": q}
    )
    return value, grads


def isometry_loss(frame0_set, curr_set, graph):
    c = ad.leaf(curr_set.centers)
    value, grads = _eval_with_grads(
        lambda: isometry_loss_t(frame0_set.centers, c, graph), {"centers": c}
    )
    return value, grads


def rotation_loss(prev_set, curr_set, graph):
    q = ad.leaf(curr_set.orientations)
    value, grads = _eval_with_grads(
        lambda: rotation_loss_t(prev_set, q, graph), {"orientations": q}
    )
    return value, grads


def data_loss(curr_set, obs, workers=1):
    c = ad.leaf(curr_set.centers)
    value, grads = _eval_with_grads(lambda: data_loss_t(c, obs, workers=workers), {"centers": c})
    return value, grads


# ---------------------------------------------------------------------------
# the full objective over cascade parameters


def total_loss(cascade, prev_set, obs, graph, weights, max_scale,
               frame0_centers=None, propagate_covariance=True, workers=1,
               with_grads=True):
    """Weighted objective through cascade_apply.

    Returns (total, components, grads) where components maps each term name to
    its unweighted value and grads maps every cascade parameter leaf (same
    keys as CascadeTrace.leaves) to its gradient array. With with_grads=False
    the forward runs on constants and grads is None.
    """
    if frame0_centers is None:
        frame0_centers = prev_set.centers
    trace = trace_cascade(
        cascade, prev_set,
        propagate_covariance=propagate_covariance,
        differentiable=with_grads,
    )
    terms = {
        "rigidity": rigidity_loss_t(prev_set, trace.centers, trace.orientations, graph),
        "isometry": isometry_loss_t(frame0_centers, trace.centers, graph),
        "rotation": rotation_loss_t(prev_set, trace.orientations, graph),
        "scale": scale_loss_t(trace.scales, max_scale),
        "data": data_loss_t(trace.centers, obs, workers=workers),
    }
    wmap = {
        "rigidity": weights.w_rigid,
        "isometry": weights.w_iso,
        "rotation": weights.w_rot,
        "scale": weights.w_scale,
        "data": weights.w_data,
    }
    total = None
    for name, term in terms.items():
        piece = ad.mul(term, wmap[name])
        total = piece if total is None else total + piece
    components = {name: float(term.value) for name, term in terms.items()}

    if not with_grads:
        return float(total.value), components, None
    total.backward()
    grads = {
        name: (np.zeros_like(t.value) if t.grad is None else t.grad)
        for name, t in trace.leaves.items()
    }
    return float(total.value), components, grads
