"""Adam optimization of the cascade, one frame at a time.

Each frame starts from the previous frame's converged Gaussians (the state
warm start) with a fresh zero cascade and fresh optimizer moments, runs a
fixed iteration budget of the total objective, and emits the deformed set.
Cluster centroids are recomputed from the previous frame's centers at the
frame transition and stay frozen while that frame optimizes. A flag switches
to copying the previous frame's parameter values instead of the zero cascade
(motion-extrapolation variant).

Each parameter class steps with its own learning rate; quaternion parameters
are renormalized to unit length after every step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .clustering import build_hierarchy, recluster
from .deform import cascade_apply, cascade_zero
from .losses import LossWeights, build_neighbor_graph, total_loss

DELTA_LR_FRACTION = 0.1


@dataclass
class TrainConfig:
    iters_per_frame: int = 100
    lr_rot: float = 1e-3
    lr_trans: float = None  # defaults to 1.6e-2 * scene_scale
    lr_scaledir: float = 1e-3
    lr_sbias: float = 1e-3
    lr_delta: float = None  # defaults to DELTA_LR_FRACTION of each cluster rate
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    max_scale: float = 0.02
    layer_sizes: tuple = (8, 40, 160)
    seed: int = 0
    scene_scale: float = 1.0
    k_neighbors: int = 20
    lambda_weight: float = None  # defaults to 2000 / scene_scale**2
    propagate_covariance: bool = True
    anchored: bool = True
    warm_start_params: bool = False
    recluster_every: int = 0  # frames between hierarchy rebuilds; 0 = never
    threads: int = 1

    def __post_init__(self):
        if self.iters_per_frame < 1:
            raise ValueError("iters_per_frame must be >= 1")
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        for name in ("lr_rot", "lr_scaledir", "lr_sbias"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    def resolved_lr(self, key):
        """Learning rate for a parameter leaf named like CascadeTrace.leaves."""
        lr_trans = self.lr_trans if self.lr_trans is not None else 1.6e-2 * self.scene_scale
        if key.endswith(".rotations"):
            return self.lr_rot
        if key.endswith(".translations"):
            return lr_trans
        if key.endswith(".scale_dirs"):
            return self.lr_scaledir
        if key.endswith(".scale_biases"):
            return self.lr_sbias
        if self.lr_delta is not None:
            if key in ("d_centers", "d_rotations", "d_log_scales"):
                return self.lr_delta
        if key == "d_centers":
            return DELTA_LR_FRACTION * lr_trans
        if key == "d_rotations":
            return DELTA_LR_FRACTION * self.lr_rot
        if key == "d_log_scales":
            return DELTA_LR_FRACTION * self.lr_scaledir
        raise KeyError(f"unknown parameter class: {key}")


class AdamState:
    """Per-parameter-array Adam moments."""

    def __init__(self, config):
        self.config = config
        self.m = {}
        self.v = {}
        self.t = 0


def _param_array(cascade, key):
    if key.startswith("layer"):
        layer_idx, attr = key[len("layer"):].split(".")
        return getattr(cascade.layers[int(layer_idx)], attr)
    return getattr(cascade, key)


def adam_step(cascade, grads, state, config):
    """One Adam update in place; returns (cascade, state).

    Raises on non-finite gradients, naming the offending parameter class.
    Quaternion arrays are renormalized after the update.
    """
    state.t += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    for key in sorted(grads):
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter class '{key}'")
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(g)
            state.v[key] = np.zeros_like(g)
        v = state.v[key]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[key] = m
        state.v[key] = v
        mhat = m / (1.0 - b1**state.t)
        vhat = v / (1.0 - b2**state.t)
        arr = _param_array(cascade, key)
        arr -= config.resolved_lr(key) * mhat / (np.sqrt(vhat) + eps)
        if key.endswith("rotations"):
            arr[:] = geometry.quat_normalize(arr)
    return cascade, state


@dataclass
class FrameReport:
    frame_index: int
    curve: list  # per iteration: dict of component values + "total"
    final_losses: dict
    iterations: int
    wall_time: float


@dataclass
class FitReport:
    frames: list  # FrameReport per fitted frame
    sets: list  # GaussianSet per frame, index 0 = the given initial set
    cascades: list  # converged CascadeDeform per fitted frame
    hierarchy: object
    wall_time: float


def fit_frame(prev_set, obs, hierarchy, config, frame0_centers=None,
              graph=None, init_cascade=None):
    """Fit one frame transition; returns (deformed set, cascade, FrameReport)."""
    t0 = time.perf_counter()
    if graph is None:
        graph = build_neighbor_graph(
            prev_set.centers,
            k=min(config.k_neighbors, prev_set.n - 1),
            lambda_weight=config.lambda_weight,
            scene_scale=config.scene_scale,
            workers=config.threads,
        )
    if frame0_centers is None:
        frame0_centers = prev_set.centers
    cascade = init_cascade.copy() if init_cascade is not None else cascade_zero(
        hierarchy, prev_set.n, anchored=config.anchored
    )
    state = AdamState(config)
    curve = []
    for _ in range(config.iters_per_frame):
        value, components, grads = total_loss(
            cascade, prev_set, obs, graph, config.weights, config.max_scale,
            frame0_centers=frame0_centers,
            propagate_covariance=config.propagate_covariance,
            workers=config.threads,
        )
        entry = dict(components)
        entry["total"] = value
        curve.append(entry)
        cascade, state = adam_step(cascade, grads, state, config)

    final_value, final_components, _ = total_loss(
        cascade, prev_set, obs, graph, config.weights, config.max_scale,
        frame0_centers=frame0_centers,
        propagate_covariance=config.propagate_covariance,
        workers=config.threads,
        with_grads=False,
    )
    final = dict(final_components)
    final["total"] = final_value
    new_set = cascade_apply(cascade, prev_set, propagate_covariance=config.propagate_covariance)
    report = FrameReport(
        frame_index=new_set.frame_index,
        curve=curve,
        final_losses=final,
        iterations=config.iters_per_frame,
        wall_time=time.perf_counter() - t0,
    )
    return new_set, cascade, report


def fit_sequence(initial_set, sequence, config, hierarchy=None):
    """Fit a whole sequence online, frame by frame.

    `sequence` is a SceneSequence or any object with an `observations` list
    aligned to frames 0..T-1 (a plain list works too); observation 0
    corresponds to the given initial set and is not fitted.
    """
    t0 = time.perf_counter()
    observations = getattr(sequence, "observations", sequence)
    if hierarchy is None:
        hierarchy = build_hierarchy(initial_set.centers, config.layer_sizes, seed=config.seed)
    graph = build_neighbor_graph(
        initial_set.centers,
        k=min(config.k_neighbors, initial_set.n - 1),
        lambda_weight=config.lambda_weight,
        scene_scale=config.scene_scale,
        workers=config.threads,
    )
    sets = [initial_set]
    cascades = []
    reports = []
    prev = initial_set
    prev_cascade = None
    for frame, obs in enumerate(observations):
        if frame == 0:
            continue
        if config.recluster_every and frame > 1 and (frame - 1) % config.recluster_every == 0:
            hierarchy = recluster(prev.centers, hierarchy)
            graph = build_neighbor_graph(
                prev.centers,
                k=min(config.k_neighbors, prev.n - 1),
                lambda_weight=config.lambda_weight,
                scene_scale=config.scene_scale,
                workers=config.threads,
            )
        hierarchy.update_centroids(prev.centers)
        init = None
        if config.warm_start_params and prev_cascade is not None:
            init = prev_cascade
        new_set, cascade, report = fit_frame(
            prev, obs, hierarchy, config,
            frame0_centers=initial_set.centers,
            graph=graph,
            init_cascade=init,
        )
        sets.append(new_set)
        cascades.append(cascade)
        reports.append(report)
        prev = new_set
        prev_cascade = cascade
    return FitReport(
        frames=reports,
        sets=sets,
        cascades=cascades,
        hierarchy=hierarchy,
        wall_time=time.perf_counter() - t0,
    )


def mean_center_error(sets, gt_centers):
    """Mean 3D distance between fitted and ground-truth centers, all frames.

    gt_centers has shape (T, N, 3) aligned with `sets`; frame 0 (the given
    initial state) is excluded from the average.
    """
    errs = []
    for t in range(1, len(sets)):
        errs.append(np.linalg.norm(sets[t].centers - gt_centers[t], axis=-1).mean())
    return float(np.mean(errs))
