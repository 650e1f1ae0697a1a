"""Point-cloud containers, camera poses, and the fixed 32-pose rendering rig.

Conventions:
  * clouds are float64 (N, 3) arrays in object units; rendering assumes the
    cloud was normalized into the closed unit ball first,
  * a camera pose maps world points into its frame via ``R @ (p - center)``,
    with rows of ``R`` being the camera's right / up / forward axes, so the
    third camera coordinate is depth along the viewing direction,
  * the rig looks at the origin from distance ``radius``: three rings of 8
    cameras around the x/y/z axes plus the 8 cube-corner directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

Array = np.ndarray

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points with optional per-point provenance.

    `source_indices`, when present, records which row of a parent cloud each
    point came from (set by subsampling and group-extraction helpers).
    `degenerate` is set by `normalize_cloud` when the input had no spatial
    extent.
    """

    points: Array
    source_indices: Array | None = None
    degenerate: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DomainError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.source_indices is not None:
            idx = np.asarray(self.source_indices, dtype=np.int64)
            if idx.shape != (pts.shape[0],):
                raise DomainError("source_indices must have one entry per point")
            object.__setattr__(self, "source_indices", idx)

    @property
    def count(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class CameraPose:
    """Rigid transform plus an orthographic depth window [near, far]."""

    rotation: Array
    center: Array
    near: float
    far: float

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        ctr = np.asarray(self.center, dtype=np.float64)
        if rot.shape != (3, 3):
            raise DomainError(f"rotation must be 3x3, got {rot.shape}")
        if ctr.shape != (3,):
            raise DomainError(f"center must be a 3-vector, got {ctr.shape}")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHO_TOL:
            raise DomainError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation must have determinant +1")
        if not (self.near > 0 and self.far > self.near):
            raise DomainError(f"need 0 < near < far, got near={self.near} far={self.far}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", ctr)

    @property
    def view_direction(self) -> Array:
        """Unit vector the camera looks along, in world coordinates."""
        return self.rotation[2].copy()


@dataclass(frozen=True)
class RenderConfig:
    """Resolution and splat kernel parameters of the depth renderer.

    Spatial units: `sigma` and `truncation_radius` are measured in voxels.
    The view volume is x, y in [-1, 1] laterally and [near, far] of the pose
    in depth, discretized to `grid_depth` x `image_height` x `image_width`
    voxels. `background_depth` is the normalized depth written where every
    ray survives the volume.
    """

    grid_depth: int = 32
    image_height: int = 32
    image_width: int = 32
    sigma: float = 1.0
    splat_scale: float = 1.0
    truncation_radius: float = 3.0
    background_depth: float = 1.0

    def __post_init__(self):
        if min(self.grid_depth, self.image_height, self.image_width) < 1:
            raise DomainError("grid dimensions must be positive")
        if not self.sigma > 0:
            raise DomainError("sigma must be positive")
        if not self.splat_scale > 0:
            raise DomainError("splat_scale must be positive")
        if self.truncation_radius < self.sigma:
            raise DomainError("truncation_radius must be at least sigma")
        if not 0.0 <= self.background_depth <= 1.0:
            raise DomainError("background_depth must lie in [0, 1]")


def look_at(center: Array, up_hint: Array, near: float, far: float) -> CameraPose:
    """Build the pose at `center` looking at the origin.

    Falls back to world +y when `up_hint` is parallel to the view direction.
    """
    center = np.asarray(center, dtype=np.float64)
    forward = -center / np.linalg.norm(center)
    up = np.asarray(up_hint, dtype=np.float64)
    right = np.cross(up, forward)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(np.array([0.0, 1.0, 0.0]), forward)
    right = right / np.linalg.norm(right)
    true_up = np.cross(forward, right)
    rotation = np.stack([right, true_up, forward])
    return CameraPose(rotation=rotation, center=center, near=near, far=far)


def generate_camera_poses(radius: float) -> list[CameraPose]:
    """The fixed 32-pose rig:8 poses around each world axis plus 8 diagonals.

    Ring poses for axis a have view directions in the plane orthogonal to a,
    at azimuths 0, 45, ..., 315 degrees, with a as the up vector. Diagonal
    poses look inward from (+-1, +-1, +-1)/sqrt(3) with world +z up. All
    centers sit at distance `radius` from the origin; the depth window is
    sized to hold the unit ball.
    """
    if not radius > 0:
        raise DomainError(f"radius must be positive, got {radius}")
    near = max(radius - 1.0, radius * 1e-3)
    far = radius + 1.0
    axes = np.eye(3)
    poses: list[CameraPose] = []
    for a in range(3):
        u = axes[(a + 1) % 3]
        v = axes[(a + 2) % 3]
        for k in range(8):
            theta = np.pi / 4.0 * k
            direction = np.cos(theta) * u + np.sin(theta) * v
            poses.append(look_at(-radius * direction, axes[a], near, far))
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            for sz in (1.0, -1.0):
                corner = np.array([sx, sy, sz]) / np.sqrt(3.0)
                poses.append(look_at(radius * corner, np.array([0.0, 0.0, 1.0]), near, far))
    return poses


def world_to_camera(cloud: PointCloud, pose: CameraPose) -> PointCloud:
    """Apply ``R @ (p - center)`` to every point."""
    cam = (cloud.points - pose.center) @ pose.rotation.T
    return PointCloud(cam, source_indices=cloud.source_indices)


def world_to_camera_vjp(pose: CameraPose, upstream: Array) -> Array:
    """Pull an (N, 3) cotangent on camera coordinates back to world points."""
    return np.asarray(upstream, dtype=np.float64) @ pose.rotation


def camera_to_world(cloud: PointCloud, pose: CameraPose) -> PointCloud:
    """Inverse of `world_to_camera`."""
    world = cloud.points @ pose.rotation + pose.center
    return PointCloud(world, source_indices=cloud.source_indices)


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Translate to the centroid and scale into the closed unit ball.

    A cloud with no spatial extent comes back zero-centered with scale 1 and
    the `degenerate` flag set.
    """
    if cloud.count < 1:
        raise DomainError("cannot normalize an empty cloud")
    centroid = cloud.points.mean(axis=0)
    centered = cloud.points - centroid
    radius = float(np.max(np.linalg.norm(centered, axis=1)))
    if radius < 1e-12:
        return PointCloud(centered, source_indices=cloud.source_indices, degenerate=True)
    return PointCloud(centered / radius, source_indices=cloud.source_indices)
