"""Rigid-body poses, pinhole cameras, voxel-grid layout, and feature alignment.

Conventions used throughout the package:

* Ego axes: x forward, y left, z up.  Poses map ego coordinates to world
  coordinates (``x_world = R @ x_ego + t``).
* Camera axes: z forward (optical axis), x right, y down.  A camera's
  extrinsics give the camera pose in the ego frame.
* Voxel grids index (i, j, k) along the metric (x, y, z) axes; features
  are stored as [H, W, Z, D] arrays in that axis order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor

DEPTH_EPS = 1e-6
_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EgoPose:
    """Rigid transform of the ego body at one frame (ego -> world)."""

    rotation: np.ndarray
    translation: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {rot.shape}")
        if np.abs(rot.T @ rot - np.eye(3)).max() > _ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise GeometryError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity(timestamp: int = 0) -> "EgoPose":
        return EgoPose(np.eye(3), np.zeros(3), timestamp)

    @staticmethod
    def from_yaw(yaw: float, translation, timestamp: int = 0) -> "EgoPose":
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return EgoPose(rot, np.asarray(translation, dtype=np.float64), timestamp)

    def inverse(self) -> "EgoPose":
        return EgoPose(self.rotation.T, -self.rotation.T @ self.translation, self.timestamp)

    def compose(self, other: "EgoPose") -> "EgoPose":
        """self after other: (self o other)(x) = self(other(x))."""
        return EgoPose(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation,
                       self.timestamp)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera: intrinsics, pose in the ego frame, pixel extent."""

    intrinsics: np.ndarray
    extrinsics: EgoPose
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        intr = np.asarray(self.intrinsics, dtype=np.float64)
        if intr.shape != (3, 3):
            raise GeometryError(f"intrinsics must be 3x3, got {intr.shape}")
        w, h = self.image_size
        fx, fy, cx, cy = intr[0, 0], intr[1, 1], intr[0, 2], intr[1, 2]
        if fx <= 0 or fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= cx < w and 0 <= cy < h):
            raise GeometryError("principal point must lie inside the image")
        object.__setattr__(self, "intrinsics", intr)
        object.__setattr__(self, "image_size", (int(w), int(h)))

    @staticmethod
    def build(fx: float, fy: float, cx: float, cy: float,
              extrinsics: EgoPose, image_size) -> "CameraModel":
        intr = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return CameraModel(intr, extrinsics, tuple(image_size))

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def cx(self):
        return self.intrinsics[0, 2]

    @property
    def cy(self):
        return self.intrinsics[1, 2]


def project_to_image(cam: CameraModel, point) -> tuple[float, float, bool]:
    """Project an ego-frame point to (u, v, valid).

    valid is False when the camera-frame depth is <= DEPTH_EPS or the pixel
    falls outside [0, W-1] x [0, H-1]; validity is data, not an error.
    """
    uv, valid = project_points(cam, np.asarray(point, dtype=np.float64).reshape(1, 3))
    return float(uv[0, 0]), float(uv[0, 1]), bool(valid[0])


def project_points(cam: CameraModel, points: np.ndarray):
    """Vectorized projection: ego-frame [N,3] -> ([N,2] pixels, [N] valid)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam_from_ego = cam.extrinsics.inverse()
    pc = pts @ cam_from_ego.rotation.T + cam_from_ego.translation
    z = pc[:, 2]
    depth_ok = z > DEPTH_EPS
    z_safe = np.where(depth_ok, z, 1.0)
    u = cam.fx * pc[:, 0] / z_safe + cam.cx
    v = cam.fy * pc[:, 1] / z_safe + cam.cy
    w, h = cam.image_size
    inside = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    return np.stack([u, v], axis=1), depth_ok & inside


def project_points_diff(cam: CameraModel, points: Tensor):
    """Projection on the tape: returns ([N,2] pixel Tensor, [N] depth mask).

    Rows with non-positive depth get a placeholder division so the math
    stays finite; callers must zero those rows using the returned mask.
    """
    cam_from_ego = cam.extrinsics.inverse()
    rot = nm.constant(cam_from_ego.rotation.T)
    tra = nm.constant(cam_from_ego.translation.reshape(1, 3))
    pc = nm.matmul(points, rot) + tra
    z = pc[:, 2:3]
    depth_ok = (z.data[:, 0] > DEPTH_EPS)
    mask = nm.constant(depth_ok.astype(np.float64)[:, None])
    z_safe = z * mask + (1.0 - mask)
    u = pc[:, 0:1] * float(cam.fx) / z_safe + float(cam.cx)
    v = pc[:, 1:2] * float(cam.fy) / z_safe + float(cam.cy)
    return nm.concat([u, v], axis=1), depth_ok


def back_project(cam: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    """Invert the pinhole map at a known camera-frame depth -> ego point."""
    x = (u - cam.cx) / cam.fx * depth
    y = (v - cam.cy) / cam.fy * depth
    pc = np.array([x, y, depth])
    return cam.extrinsics.apply(pc)


@dataclass(frozen=True, eq=False)
class VoxelGridSpec:
    """Metric layout of a voxel grid: cell counts and world extent."""

    dims: tuple[int, int, int]
    range_min: np.ndarray
    range_max: np.ndarray
    cell_size: np.ndarray = field(init=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        rmin = np.asarray(self.range_min, dtype=np.float64).reshape(3)
        rmax = np.asarray(self.range_max, dtype=np.float64).reshape(3)
        if any(d <= 0 for d in dims):
            raise GeometryError(f"dims must be positive, got {dims}")
        if not np.all(rmax > rmin):
            raise GeometryError("range_max must exceed range_min componentwise")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "range_min", rmin)
        object.__setattr__(self, "range_max", rmax)
        object.__setattr__(self, "cell_size", (rmax - rmin) / np.array(dims, dtype=np.float64))

    @property
    def num_cells(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def scaled(self, factors: tuple[int, int, int]) -> "VoxelGridSpec":
        """Same extent, cell counts multiplied per axis (decoder output grid)."""
        dims = tuple(d * f for d, f in zip(self.dims, factors))
        return VoxelGridSpec(dims, self.range_min, self.range_max)


def voxel_center(spec: VoxelGridSpec, i: int, j: int, k: int) -> np.ndarray:
    """Metric center of cell (i, j, k) in the ego frame."""
    idx = (i, j, k)
    for ax, (n, d) in enumerate(zip(idx, spec.dims)):
        if not (0 <= n < d):
            raise GeometryError(f"index {idx} out of range for dims {spec.dims} (axis {ax})")
    return spec.range_min + (np.array(idx, dtype=np.float64) + 0.5) * spec.cell_size


def voxel_centers(spec: VoxelGridSpec) -> np.ndarray:
    """Centers of every cell, shape [H*W*Z, 3], C-order over (i, j, k)."""
    h, w, z = spec.dims
    ii, jj, kk = np.meshgrid(np.arange(h), np.arange(w), np.arange(z), indexing="ij")
    idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
    return spec.range_min + (idx + 0.5) * spec.cell_size


def point_to_index(spec: VoxelGridSpec, points: np.ndarray) -> np.ndarray:
    """Metric ego-frame points -> fractional (i, j, k) index coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    return (pts - spec.range_min) / spec.cell_size - 0.5


def align_voxel_features(src: Tensor, spec: VoxelGridSpec,
                         pose_now: EgoPose, pose_then: EgoPose) -> Tensor:
    """Resample a past feature volume into the current ego frame.

    For each current cell center c, looks up the same world point in the
    past frame (pose_then^-1 o pose_now) and trilinearly samples ``src``
    there.  Points outside the grid yield zero features.  Differentiable
    with respect to ``src``.
    """
    if src.shape[:3] != spec.dims:
        raise GeometryError(f"volume shape {src.shape} does not match spec dims {spec.dims}")
    rel = pose_then.inverse().compose(pose_now)
    centers_now = voxel_centers(spec)
    centers_then = rel.apply(centers_now)
    idx = point_to_index(spec, centers_then)
    sampled = nm.trilinear_sample(src, idx)
    return nm.reshape(sampled, spec.dims + (src.shape[3],))
