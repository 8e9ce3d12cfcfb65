"""Pinhole projection and 2D trajectory-error evaluation.

A tracked point is just a Gaussian index: its predicted 2D track is the
projection of that Gaussian's center at every frame. No re-association ever
happens — index identity across frames is the tracker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry

_MIN_DEPTH = 1e-9
CANDIDATE_RADIUS_PX = 10.0


@dataclass
class PinholeCamera:
    """World-to-camera rigid transform plus intrinsics (pixels). +z looks forward."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (4,) unit quaternion, world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        self.rotation = geometry.quat_normalize(np.asarray(self.rotation, dtype=np.float64))
        self.translation = np.asarray(self.translation, dtype=np.float64)

    @property
    def image_diagonal(self):
        return float(np.hypot(self.width, self.height))

    def to_payload(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": [float(v) for v in self.rotation],
            "translation": [float(v) for v in self.translation],
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_payload(cls, payload):
        return cls(**payload)


def look_at_camera(eye, target, fx, fy, width, height, up=(0.0, 1.0, 0.0)):
    """Camera at `eye` looking at `target`: +z forward, +x right, +y image-down."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])  # rows: camera axes in world coords
    return PinholeCamera(
        fx=float(fx), fy=float(fy), cx=width / 2.0, cy=height / 2.0,
        rotation=geometry.matrix_to_quat(R),
        translation=-R @ eye,
        width=int(width), height=int(height),
    )


def project(camera, points):
    """Project (..., 3) world points; returns (pixels (..., 2), depth, valid).

    Points at or behind the camera plane (depth <= 1e-9) come back invalid
    with NaN pixels.
    """
    points = np.asarray(points, dtype=np.float64)
    R = geometry.quat_to_matrix(camera.rotation)
    cam = points @ R.T + camera.translation
    depth = cam[..., 2]
    valid = depth > _MIN_DEPTH
    zsafe = np.where(valid, depth, 1.0)
    u = camera.fx * cam[..., 0] / zsafe + camera.cx
    v = camera.fy * cam[..., 1] / zsafe + camera.cy
    pix = np.stack([u, v], axis=-1)
    pix = np.where(valid[..., None], pix, np.nan)
    return pix, depth, valid


def unproject(camera, pixels, depth):
    """Inverse of project given per-pixel depth (for round-trip checks)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (pixels[..., 0] - camera.cx) / camera.fx * depth
    y = (pixels[..., 1] - camera.cy) / camera.fy * depth
    cam = np.stack([x, y, depth], axis=-1)
    R = geometry.quat_to_matrix(camera.rotation)
    return (cam - camera.translation) @ R


@dataclass
class Track2D:
    """Pixel positions of one tracked point over time."""

    pixels: np.ndarray  # (T, 2)
    valid: np.ndarray  # (T,) bool

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.pixels.shape != (self.valid.shape[0], 2):
            raise ValueError("pixels must be (T, 2) aligned with valid flags")


def project_track(camera, centers_over_time):
    """(T, 3) world trajectory -> Track2D."""
    pix, _, valid = project(camera, np.asarray(centers_over_time, dtype=np.float64))
    return Track2D(pixels=pix, valid=valid)


def mte(pred, gt, image_diagonal):
    """Median pixel distance between two tracks / image diagonal (a fraction)."""
    both = pred.valid & gt.valid
    if not np.any(both):
        raise ValueError("tracks share no valid frames")
    d = np.linalg.norm(pred.pixels[both] - gt.pixels[both], axis=-1)
    return float(np.median(d) / image_diagonal)


def select_candidate(centers_traj, camera, gt_track):
    """Pick the Gaussian that best explains a ground-truth 2D track.

    centers_traj is the fitted (T, N, 3) center trajectory. Candidates are
    all Gaussians whose frame-0 projection lands within 10 pixels of the
    track's first point; among them the one with the lowest full-sequence
    MTE wins. Raises if no candidate is in range.
    """
    centers_traj = np.asarray(centers_traj, dtype=np.float64)
    pix0, _, valid0 = project(camera, centers_traj[0])
    d0 = np.linalg.norm(pix0 - gt_track.pixels[0], axis=-1)
    cand = np.nonzero(valid0 & (d0 <= CANDIDATE_RADIUS_PX))[0]
    if cand.size == 0:
        raise ValueError("no Gaussian projects within 10 px of the track start")
    best_idx = -1
    best_err = np.inf
    for i in cand:
        err = mte(project_track(camera, centers_traj[:, i]), gt_track, camera.image_diagonal)
        if err < best_err:
            best_err = err
            best_idx = int(i)
    return best_idx
