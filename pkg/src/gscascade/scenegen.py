"""Deterministic synthetic articulated scenes with exact ground truth.

Each scene kind places Gaussians on a few parts at frame 0 and moves every
rigid part by an exact closed-form rigid transform per frame (the cloth kind
applies a smooth sinusoidal field instead, and is deliberately non-rigid).
The generator emits, per frame, ground-truth centers and identity-matched
observations (optionally noised), plus part labels, per-part rotations, and a
ring of pinhole cameras — everything the fitting, segmentation, and tracking
evaluations need.

Kinds:
  * wheel         spinning disc plus a static stand (rotationally symmetric,
                  which makes pixel-space tracking ambiguous on purpose)
  * pendulum      rod+bob swinging about a pivot, plus a static mount
  * two_link_arm  static base, upper link rotating at the shoulder, lower
                  link composing shoulder and elbow rotations
  * cloth_wave    grid under a traveling sine wave (non-rigid)
  * two_blobs     two compact blobs translating in opposite directions

`motion_magnitude` means degrees/frame for the rotational kinds, world
units/frame for two_blobs, and wave amplitude in world units for cloth_wave.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .core import GaussianSet
from .losses import DataObservation
from .tracking import PinholeCamera, look_at_camera

KINDS = ("wheel", "pendulum", "two_link_arm", "cloth_wave", "two_blobs")

_DEFAULT_MAGNITUDE = {
    "wheel": 24.0,
    "pendulum": 25.0,
    "two_link_arm": 8.0,
    "cloth_wave": 0.08,
    "two_blobs": 0.05,
}

_PALETTE = np.array(
    [
        [0.85, 0.30, 0.25],
        [0.25, 0.45, 0.85],
        [0.30, 0.75, 0.35],
        [0.90, 0.75, 0.20],
    ]
)


@dataclass
class SceneSpec:
    kind: str
    n_gaussians: int = 400
    n_frames: int = 20
    motion_magnitude: float = None  # per-kind default when None
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind '{self.kind}' (choose from {KINDS})")
        if self.n_gaussians < 10:
            raise ValueError("n_gaussians must be >= 10")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if self.motion_magnitude is None:
            self.motion_magnitude = _DEFAULT_MAGNITUDE[self.kind]

    def to_payload(self):
        return {
            "kind": self.kind,
            "n_gaussians": int(self.n_gaussians),
            "n_frames": int(self.n_frames),
            "motion_magnitude": float(self.motion_magnitude),
            "noise_sigma": float(self.noise_sigma),
            "seed": int(self.seed),
        }

    @classmethod
    def from_payload(cls, payload):
        return cls(**payload)


@dataclass
class SceneSequence:
    spec: SceneSpec
    frame0: GaussianSet
    observations: list  # DataObservation per frame (identity correspondence)
    gt_centers: np.ndarray  # (T, N, 3)
    part_labels: np.ndarray  # (N,)
    part_quats: np.ndarray  # (T, P, 4) rotation of each part relative to frame 0
    cameras: list  # PinholeCamera ring

    @property
    def n_frames(self):
        return self.gt_centers.shape[0]

    @property
    def scene_scale(self):
        lo = self.frame0.centers.min(axis=0)
        hi = self.frame0.centers.max(axis=0)
        return float(np.linalg.norm(hi - lo))


def _axis_quat(axis, angle_rad):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def _sample_box(rng, n, lo, hi):
    return rng.uniform(lo, hi, size=(n, 3))


def _sample_disc(rng, n, radius, thickness):
    r = radius * np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-thickness, thickness, size=n)
    return np.stack([r * np.cos(th), r * np.sin(th), z], axis=-1)


def _sample_ball(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    return np.asarray(center) + v * r


def _sample_capsule(rng, n, a, b, radius):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = rng.uniform(size=(n, 1))
    offs = rng.normal(size=(n, 3))
    offs /= np.linalg.norm(offs, axis=-1, keepdims=True)
    offs *= radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    return a + t * (b - a) + offs


def _rigid_motion(points, quat, pivot, extra_translation=0.0):
    R = geometry.quat_to_matrix(quat)
    return (points - pivot) @ R.T + pivot + extra_translation


def _split_counts(n, fractions):
    counts = [max(3, int(round(n * f))) for f in fractions]
    while sum(counts) > n:
        i = int(np.argmax(counts))
        counts[i] -= 1
        if counts[i] < 3:
            raise ValueError("n_gaussians too small for this scene's part split")
    while sum(counts) < n:
        counts[int(np.argmin(counts))] += 1
    return counts


def _camera_ring(n_cams=8, radius=2.6, height=0.5):
    cams = []
    for i in range(n_cams):
        a = 2.0 * np.pi * i / n_cams
        eye = np.array([radius * np.cos(a), height, radius * np.sin(a)])
        cams.append(look_at_camera(eye, target=np.zeros(3), fx=800.0, fy=800.0,
                                   width=640, height=640))
    return cams


def generate(spec):
    """Build the full deterministic sequence for a SceneSpec."""
    rng = np.random.default_rng(spec.seed)
    t_idx = np.arange(spec.n_frames)

    if spec.kind == "wheel":
        n_wheel, n_stand = _split_counts(spec.n_gaussians, (0.75, 0.25))
        parts = [
            _sample_disc(rng, n_wheel, radius=0.5, thickness=0.02),
            _sample_box(rng, n_stand, (-0.06, -1.05, -0.04), (0.06, -0.68, 0.04)),
        ]
        angles = np.deg2rad(spec.motion_magnitude) * t_idx
        part_quats = np.stack(
            [
                [_axis_quat((0.0, 0.0, 1.0), a) for a in angles],
                [geometry.quat_normalize((1.0, 0.0, 0.0, 0.0))] * spec.n_frames,
            ],
            axis=1,
        )
        pivots = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        translations = np.zeros((spec.n_frames, 2, 3))

    elif spec.kind == "pendulum":
        pivot = np.array([0.0, 0.55, 0.0])
        n_mount, n_arm = _split_counts(spec.n_gaussians, (0.2, 0.8))
        bob_center = pivot + np.array([0.0, -0.8, 0.0])
        n_rod = max(4, n_arm // 3)
        n_bob = n_arm - n_rod
        parts = [
            _sample_box(rng, n_mount, (-0.12, 0.58, -0.08), (0.12, 0.74, 0.08)),
            np.concatenate(
                [
                    _sample_capsule(rng, n_rod, pivot, bob_center, radius=0.03),
                    _sample_ball(rng, n_bob, bob_center, radius=0.14),
                ]
            ),
        ]
        angles = np.deg2rad(spec.motion_magnitude) * np.sin(2.0 * np.pi * t_idx / 16.0)
        part_quats = np.stack(
            [
                [geometry.quat_normalize((1.0, 0.0, 0.0, 0.0))] * spec.n_frames,
                [_axis_quat((0.0, 0.0, 1.0), a) for a in angles],
            ],
            axis=1,
        )
        pivots = np.array([[0.0, 0.0, 0.0], pivot])
        translations = np.zeros((spec.n_frames, 2, 3))

    elif spec.kind == "two_link_arm":
        shoulder = np.zeros(3)
        elbow = np.array([0.45, 0.0, 0.0])
        tip = np.array([0.9, 0.0, 0.0])
        n_base, n_link1, n_link2 = _split_counts(spec.n_gaussians, (0.2, 0.4, 0.4))
        # leave a small gap at the elbow: coincident end caps would create
        # points whose trajectories are identical for both links, making the
        # part assignment genuinely ambiguous there
        joint_gap = np.array([0.09, 0.0, 0.0])
        parts = [
            _sample_box(rng, n_base, (-0.16, -0.3, -0.16), (0.16, -0.08, 0.16)),
            _sample_capsule(rng, n_link1, shoulder, elbow - joint_gap, radius=0.055),
            _sample_capsule(rng, n_link2, elbow + joint_gap, tip, radius=0.045),
        ]
        th1 = np.deg2rad(spec.motion_magnitude) * t_idx
        th2 = np.deg2rad(1.5 * spec.motion_magnitude) * t_idx
        identity = geometry.quat_normalize((1.0, 0.0, 0.0, 0.0))
        q1 = [_axis_quat((0.0, 0.0, 1.0), a) for a in th1]
        q2 = [_axis_quat((0.0, 0.0, 1.0), a) for a in th2]
        # link2 composes: rotate about the elbow, then carry with the shoulder
        part_quats = np.stack(
            [
                [identity] * spec.n_frames,
                q1,
                [geometry.quat_multiply(a, b) for a, b in zip(q1, q2)],
            ],
            axis=1,
        )
        pivots = np.array([shoulder, shoulder, shoulder])
        # effective pivot of link2's composed rotation is not the shoulder;
        # fold the correction into a per-frame translation
        translations = np.zeros((spec.n_frames, 3, 3))
        for t in range(spec.n_frames):
            R1 = geometry.quat_to_matrix(q1[t])
            R2 = geometry.quat_to_matrix(q2[t])
            # x_t = R1 (R2 (x0 - elbow) + elbow - shoulder) + shoulder
            #     = (R1 R2)(x0 - shoulder) + shift
            shift = R1 @ (np.eye(3) - R2) @ (elbow - shoulder)
            translations[t, 2] = shift

    elif spec.kind == "cloth_wave":
        side = int(np.ceil(np.sqrt(spec.n_gaussians)))
        g = np.linspace(-0.5, 0.5, side)
        xx, zz = np.meshgrid(g, g)
        pts = np.stack([xx.ravel(), np.zeros(side * side), zz.ravel()], axis=-1)
        pts = pts[: spec.n_gaussians]
        pts = pts + rng.normal(scale=0.004, size=pts.shape)
        parts = [pts]
        part_quats = np.tile(
            geometry.quat_normalize((1.0, 0.0, 0.0, 0.0)), (spec.n_frames, 1, 1)
        )
        pivots = np.zeros((1, 3))
        translations = np.zeros((spec.n_frames, 1, 3))

    else:  # two_blobs
        n_a, n_b = _split_counts(spec.n_gaussians, (0.5, 0.5))
        c_a = np.array([-0.3, 0.0, 0.0])
        c_b = np.array([0.3, 0.0, 0.0])
        parts = [
            _sample_ball(rng, n_a, c_a, radius=0.18),
            _sample_ball(rng, n_b, c_b, radius=0.18),
        ]
        part_quats = np.tile(
            geometry.quat_normalize((1.0, 0.0, 0.0, 0.0)), (spec.n_frames, 2, 1)
        )
        pivots = np.zeros((2, 3))
        translations = np.zeros((spec.n_frames, 2, 3))
        translations[:, 0, 0] = -spec.motion_magnitude * t_idx
        translations[:, 1, 0] = +spec.motion_magnitude * t_idx

    labels = np.concatenate([np.full(len(p), i, dtype=np.int64) for i, p in enumerate(parts)])
    base_points = np.concatenate(parts)
    n = base_points.shape[0]

    gt = np.empty((spec.n_frames, n, 3))
    for t in range(spec.n_frames):
        if spec.kind == "cloth_wave":
            phase = 2.0 * np.pi * (base_points[:, 0] + 0.3 * base_points[:, 2]) / 0.8
            wave = spec.motion_magnitude * np.sin(phase - 2.0 * np.pi * t / 10.0)
            rest = spec.motion_magnitude * np.sin(phase)
            moved = base_points.copy()
            moved[:, 1] += wave - rest  # frame 0 stays at the sampled points
            gt[t] = moved
        else:
            for p in range(len(parts)):
                sel = labels == p
                gt[t, sel] = _rigid_motion(
                    base_points[sel], part_quats[t, p], pivots[p], translations[t, p]
                )

    base_scale = rng.uniform(0.005, 0.009, size=(n, 1))
    scales = base_scale * np.array([2.0, 1.4, 1.0])
    # Identity initial orientations: spatially coherent like a reconstructed
    # scene, so absolute per-frame rotations carry the part-motion signal
    # instead of a random per-Gaussian gauge.
    orientations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    colors = _PALETTE[labels % len(_PALETTE)]
    frame0 = GaussianSet(
        centers=gt[0].copy(),
        orientations=orientations,
        scales=scales,
        colors=colors,
        frame_index=0,
    )

    noise_rng = np.random.default_rng(spec.seed + 7919)
    observations = []
    for t in range(spec.n_frames):
        pts = gt[t].copy()
        if spec.noise_sigma > 0.0:
            pts += noise_rng.normal(scale=spec.noise_sigma, size=pts.shape)
        observations.append(DataObservation(points=pts, correspondence=np.arange(n)))

    return SceneSequence(
        spec=spec,
        frame0=frame0,
        observations=observations,
        gt_centers=gt,
        part_labels=labels,
        part_quats=np.asarray(part_quats, dtype=np.float64),
        cameras=_camera_ring(),
    )


def perturb(sequence, sigma, seed=None):
    """Fresh copy with observations re-noised at std `sigma`; ground truth kept."""
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    if seed is None:
        seed = sequence.spec.seed + 104729
    rng = np.random.default_rng(seed)
    observations = []
    for t in range(sequence.n_frames):
        pts = sequence.gt_centers[t].copy()
        if sigma > 0.0:
            pts += rng.normal(scale=sigma, size=pts.shape)
        observations.append(
            DataObservation(points=pts, correspondence=np.arange(pts.shape[0]))
        )
    return replace(sequence, observations=observations)
