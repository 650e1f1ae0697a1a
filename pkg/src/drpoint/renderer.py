"""Differentiable point-cloud-to-depth rendering.

Three stages, each with a forward pass and an analytic vector-Jacobian
product:

  1. `splat_occupancy` - every point deposits a truncated Gaussian into a
     slice/row/column voxel grid; sums are clamped into [0, 1],
  2. `ray_termination` - per pixel, the probability that the ray stops in
     each depth slice (front to back), plus the survive-to-background
     residual,
  3. `project_depth` - the expected normalized depth per pixel, with the
     residual mapped to the configured background depth.

`render` composes the stages behind one camera pose; `render_views` is the
fused multi-pose version exposed as an autodiff primitive for training.
Gradients flow to point coordinates only; the clamp contributes zero
gradient wherever it is active.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import Tensor, custom
from .errors import DomainError, FormatError
from .geometry import CameraPose, PointCloud, RenderConfig, world_to_camera

Array = np.ndarray

_SUM_TOL = 1e-9
_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class OccupancyGrid:
    """Soft presence per voxel, values in [0, 1], indexed (slice, row, col)."""

    values: Array
    voxel_extent: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3:
            raise DomainError(f"occupancy grid must be 3D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise DomainError("occupancy values must be finite")
        if vals.min(initial=0.0) < -_RANGE_TOL or vals.max(initial=0.0) > 1.0 + _RANGE_TOL:
            raise DomainError("occupancy values must lie in [0, 1]")
        object.__setattr__(self, "values", np.clip(vals, 0.0, 1.0))


@dataclass(frozen=True)
class TerminationVolume:
    """Per-voxel ray stop probabilities and the per-pixel background residual."""

    values: Array
    residual: Array

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        res = np.asarray(self.residual, dtype=np.float64)
        if vals.ndim != 3 or res.shape != vals.shape[1:]:
            raise DomainError("termination values must be (D, H, W) with (H, W) residual")
        total = vals.sum(axis=0) + res
        if np.max(np.abs(total - 1.0)) > _SUM_TOL:
            raise DomainError("termination probabilities must sum to 1 per pixel")
        if vals.min() < -_RANGE_TOL or res.min() < -_RANGE_TOL:
            raise DomainError("termination probabilities must be nonnegative")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "residual", res)


@dataclass(frozen=True)
class DepthImage:
    """Normalized depth per pixel: 0 at the near plane, 1 at the background."""

    pixels: Array

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise DomainError(f"depth image must be 2D, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise DomainError("depth pixels must be finite")
        if px.min(initial=0.0) < -_RANGE_TOL or px.max(initial=0.0) > 1.0 + _RANGE_TOL:
            raise DomainError("depth pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", np.clip(px, 0.0, 1.0))


# -- coordinate mapping ---------------------------------------------------------


def camera_to_index(camera_points: Array, cfg: RenderConfig, near: float, far: float) -> Array:
    """Map camera-frame (x, y, z) to continuous (slice, row, col) voxel indices.

    Lateral extent is fixed to [-1, 1] (clouds are normalized to the unit
    ball before rendering); +y maps to the top image row.
    """
    pts = np.asarray(camera_points, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = (pts[..., 2] - near) / (far - near) * cfg.grid_depth - 0.5
    out[..., 1] = (1.0 - pts[..., 1]) / 2.0 * cfg.image_height - 0.5
    out[..., 2] = (pts[..., 0] + 1.0) / 2.0 * cfg.image_width - 0.5
    return out


def index_to_camera(index_points: Array, cfg: RenderConfig, near: float, far: float) -> Array:
    """Inverse of `camera_to_index`; voxel (d, r, c) centers map from integers."""
    idx = np.asarray(index_points, dtype=np.float64)
    out = np.empty_like(idx)
    out[..., 2] = (idx[..., 0] + 0.5) / cfg.grid_depth * (far - near) + near
    out[..., 1] = 1.0 - (idx[..., 1] + 0.5) / cfg.image_height * 2.0
    out[..., 0] = (idx[..., 2] + 0.5) / cfg.image_width * 2.0 - 1.0
    return out


def _index_jacobian(cfg: RenderConfig, near: float, far: float) -> tuple[float, float, float]:
    """d(slice)/dz, d(row)/dy, d(col)/dx of the camera-to-index map."""
    return (
        cfg.grid_depth / (far - near),
        -cfg.image_height / 2.0,
        cfg.image_width / 2.0,
    )


def slice_depths(cfg: RenderConfig) -> Array:
    """Normalized mid-slice depths, (d + 0.5) / D for d = 0..D-1."""
    return (np.arange(cfg.grid_depth, dtype=np.float64) + 0.5) / cfg.grid_depth


def _reach(cfg: RenderConfig) -> int:
    return int(math.ceil(cfg.truncation_radius + 0.5))


def taper_width(cfg: RenderConfig) -> float:
    """Width of the C2 smootherstep shell at the truncation boundary.

    Inside [0, truncation_radius - taper] the kernel is the untouched
    Gaussian; across the shell it falls continuously to zero, which keeps
    the rendered loss finite-difference-checkable (a hard cutoff would jump
    by exp(-trunc^2 / 2 sigma^2) whenever a voxel crosses the boundary).
    The shell is one sigma wide but never eats more than half the kernel.
    """
    return min(cfg.sigma, 0.5 * cfg.truncation_radius)


def _splat_raw(index_points: Array, cfg: RenderConfig) -> Array:
    """Unclamped occupancy for (V, N, 3) index-space points."""
    pts = np.ascontiguousarray(index_points, dtype=np.float64)
    out = np.zeros((pts.shape[0], cfg.grid_depth, cfg.image_height, cfg.image_width))
    if pts.shape[1]:
        _kernels.splat_forward(
            pts, cfg.grid_depth, cfg.image_height, cfg.image_width,
            cfg.sigma, cfg.truncation_radius, taper_width(cfg), cfg.splat_scale,
            _reach(cfg), out,
        )
    return out


def _splat_raw_vjp(index_points: Array, cfg: RenderConfig, upstream: Array) -> Array:
    """Gradient w.r.t. index-space points; `upstream` must be clamp-masked."""
    pts = np.ascontiguousarray(index_points, dtype=np.float64)
    grad = np.zeros_like(pts)
    if pts.shape[1]:
        _kernels.splat_backward(
            pts, cfg.grid_depth, cfg.image_height, cfg.image_width,
            cfg.sigma, cfg.truncation_radius, taper_width(cfg), cfg.splat_scale,
            _reach(cfg), np.ascontiguousarray(upstream, dtype=np.float64), grad,
        )
    return grad


# -- stage 1: splatting -----------------------------------------------------------


def splat_occupancy(
    camera_cloud: PointCloud,
    cfg: RenderConfig,
    depth_range: tuple[float, float] = (1.0, 3.0),
) -> OccupancyGrid:
    """Deposit truncated Gaussians around every camera-frame point.

    Each voxel receives ``clamp(sum_k s * exp(-|c(v) - p_k|^2 / 2 sigma^2))``
    with distances measured in voxel units and the sum restricted to voxels
    within `truncation_radius` of the point; the outer half-sigma shell of
    each kernel is tapered smoothly to zero (see `taper_width`). Points
    outside the view volume simply contribute nothing.
    """
    near, far = depth_range
    raw = _splat_raw(camera_to_index(camera_cloud.points, cfg, near, far)[None], cfg)[0]
    return OccupancyGrid(values=np.clip(raw, 0.0, 1.0), voxel_extent=(far - near) / cfg.grid_depth)


def splat_occupancy_vjp(
    camera_cloud: PointCloud,
    cfg: RenderConfig,
    upstream: Array,
    depth_range: tuple[float, float] = (1.0, 3.0),
) -> Array:
    """Gradient of <upstream, splat_occupancy> w.r.t. camera coordinates."""
    near, far = depth_range
    idx = camera_to_index(camera_cloud.points, cfg, near, far)[None]
    raw = _splat_raw(idx, cfg)
    masked = np.asarray(upstream, dtype=np.float64)[None] * (raw < 1.0)
    gidx = _splat_raw_vjp(idx, cfg, masked)[0]
    jd, jr, jc = _index_jacobian(cfg, near, far)
    grad = np.empty_like(gidx)
    grad[:, 0] = gidx[:, 2] * jc
    grad[:, 1] = gidx[:, 1] * jr
    grad[:, 2] = gidx[:, 0] * jd
    return grad


# -- stage 2: ray termination -------------------------------------------------------


def _to_pixel_major(volume: Array) -> Array:
    """(..., D, H, W) -> contiguous (pixels, D)."""
    moved = np.ascontiguousarray(np.moveaxis(volume, -3, -1))
    return moved.reshape(-1, volume.shape[-3])


def _from_pixel_major(flat: Array, shape: tuple[int, ...]) -> Array:
    """Inverse of `_to_pixel_major` for an output of logical shape `shape`."""
    lead = shape[:-3] + (shape[-2], shape[-1], shape[-3])
    return np.ascontiguousarray(np.moveaxis(flat.reshape(lead), -1, -3))


def _termination_forward(occ: Array) -> tuple[Array, Array, Array]:
    """Return (t, residual, exclusive-prefix transmittance) along axis -3."""
    flat = _to_pixel_major(occ)
    t = np.empty_like(flat)
    prefix = np.empty_like(flat)
    residual = np.empty(flat.shape[0])
    _kernels.termination_forward(flat, t, prefix, residual)
    res_shape = occ.shape[:-3] + occ.shape[-2:]
    return _from_pixel_major(t, occ.shape), residual.reshape(res_shape), prefix


def _termination_vjp(occ: Array, prefix_flat: Array, up_t: Array, up_res: Array) -> Array:
    """Gradient w.r.t. occupancies; `prefix_flat` comes from the forward."""
    occ_flat = _to_pixel_major(occ)
    up_flat = _to_pixel_major(np.asarray(up_t, dtype=np.float64))
    grad = np.empty_like(occ_flat)
    _kernels.termination_backward(
        occ_flat, prefix_flat, up_flat,
        np.ascontiguousarray(np.asarray(up_res, dtype=np.float64).reshape(-1)), grad,
    )
    return _from_pixel_major(grad, occ.shape)


def ray_termination(grid: OccupancyGrid) -> TerminationVolume:
    """March every pixel's ray front to back.

    t_d = o_d * prod_{j<d}(1 - o_j); the residual is the probability of
    surviving all slices.
    """
    t, residual, _ = _termination_forward(grid.values)
    return TerminationVolume(values=t, residual=residual)


def ray_termination_vjp(grid: OccupancyGrid, upstream_values: Array, upstream_residual: Array) -> Array:
    """Gradient of <upstream, ray_termination> w.r.t. the occupancy values."""
    _, _, prefix = _termination_forward(grid.values)
    return _termination_vjp(
        grid.values, prefix,
        np.asarray(upstream_values, dtype=np.float64),
        np.asarray(upstream_residual, dtype=np.float64),
    )


# -- stage 3: depth projection --------------------------------------------------------


def project_depth(term: TerminationVolume, cfg: RenderConfig) -> DepthImage:
    """Expected normalized depth: sum_d t_d z_d + residual * background."""
    z = slice_depths(cfg)
    pixels = np.einsum("dhw,d->hw", term.values, z) + term.residual * cfg.background_depth
    return DepthImage(pixels=pixels)


def project_depth_vjp(cfg: RenderConfig, upstream: Array) -> tuple[Array, Array]:
    """Gradients w.r.t. (termination values, residual)."""
    up = np.asarray(upstream, dtype=np.float64)
    z = slice_depths(cfg)
    return up[None, :, :] * z[:, None, None], up * cfg.background_depth


# -- fused pipeline ----------------------------------------------------------------


def _views_forward(points: Array, poses: list[CameraPose], cfg: RenderConfig):
    """Forward images for all poses plus the cache needed for the backward pass.

    Ray marching and projection run in a (pixels, depth) layout so the
    per-ray loops stay contiguous.
    """
    rot = np.stack([p.rotation for p in poses])
    ctr = np.stack([p.center for p in poses])
    near = np.array([p.near for p in poses])
    far = np.array([p.far for p in poses])
    cam = np.matmul(points[None] - ctr[:, None], rot.transpose(0, 2, 1))
    idx = np.empty_like(cam)
    idx[..., 0] = (cam[..., 2] - near[:, None]) / (far - near)[:, None] * cfg.grid_depth - 0.5
    idx[..., 1] = (1.0 - cam[..., 1]) / 2.0 * cfg.image_height - 0.5
    idx[..., 2] = (cam[..., 0] + 1.0) / 2.0 * cfg.image_width - 0.5
    raw = _splat_raw(idx, cfg)
    occ_flat = _to_pixel_major(np.clip(raw, 0.0, 1.0))
    t_flat = np.empty_like(occ_flat)
    prefix_flat = np.empty_like(occ_flat)
    residual_flat = np.empty(occ_flat.shape[0])
    _kernels.termination_forward(occ_flat, t_flat, prefix_flat, residual_flat)
    z = slice_depths(cfg)
    images_flat = t_flat @ z + residual_flat * cfg.background_depth
    images = images_flat.reshape(len(poses), cfg.image_height, cfg.image_width)
    mask_flat = _to_pixel_major(raw < 1.0).astype(np.float64)
    cache = (rot, near, far, idx, raw.shape, mask_flat, occ_flat, prefix_flat)
    return images, cache


def _views_backward(upstream: Array, cfg: RenderConfig, cache) -> Array:
    rot, near, far, idx, vshape, mask_flat, occ_flat, prefix_flat = cache
    up_flat = np.ascontiguousarray(np.asarray(upstream, dtype=np.float64).reshape(-1))
    z = slice_depths(cfg)
    up_t_flat = np.outer(up_flat, z)
    grad_flat = np.empty_like(occ_flat)
    _kernels.termination_backward(
        occ_flat, prefix_flat, up_t_flat, up_flat * cfg.background_depth, grad_flat
    )
    grad_flat *= mask_flat  # clamp: zero gradient where it was active
    gidx = _splat_raw_vjp(idx, cfg, _from_pixel_major(grad_flat, vshape))
    jd = cfg.grid_depth / (far - near)
    gcam = np.empty_like(gidx)
    gcam[..., 0] = gidx[..., 2] * (cfg.image_width / 2.0)
    gcam[..., 1] = gidx[..., 1] * (-cfg.image_height / 2.0)
    gcam[..., 2] = gidx[..., 0] * jd[:, None]
    return np.einsum("vni,vij->nj", gcam, rot)


def render_views_array(points: Array, poses: list[CameraPose], cfg: RenderConfig) -> Array:
    """Non-differentiable fast path: (T, H, W) images for a raw (N, 3) array."""
    images, _ = _views_forward(np.asarray(points, dtype=np.float64), poses, cfg)
    return images


def render_views(points: Tensor, poses: list[CameraPose], cfg: RenderConfig) -> Tensor:
    """Autodiff primitive: render an (N, 3) point tensor from every pose."""
    images, cache = _views_forward(points.data, poses, cfg)

    def vjp(g):
        return (_views_backward(g, cfg, cache),)

    return custom(images, parents=(points,), vjp=vjp)


def render(cloud: PointCloud, pose: CameraPose, cfg: RenderConfig) -> DepthImage:
    """Project a world-frame cloud to a depth image through one pose."""
    cam = world_to_camera(cloud, pose)
    grid = splat_occupancy(cam, cfg, depth_range=(pose.near, pose.far))
    return project_depth(ray_termination(grid), cfg)


def render_vjp(cloud: PointCloud, pose: CameraPose, cfg: RenderConfig, upstream: Array) -> Array:
    """Gradient of <upstream, render(cloud, pose, cfg)> w.r.t. the points."""
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (cfg.image_height, cfg.image_width):
        raise DomainError(f"upstream must be (H, W) = ({cfg.image_height}, {cfg.image_width})")
    images, cache = _views_forward(cloud.points, [pose], cfg)
    del images
    return _views_backward(up[None], cfg, cache)


# -- raw float32 image files ---------------------------------------------------------

_F32_MAGIC = b"DRPT"
_F32_VERSION = 1


def write_depth_f32(image: DepthImage, path) -> None:
    """Raw little-endian float32 dump with a 16-byte header."""
    h, w = image.pixels.shape
    with open(path, "wb") as fh:
        fh.write(_F32_MAGIC)
        fh.write(struct.pack("<III", _F32_VERSION, h, w))
        fh.write(image.pixels.astype("<f4").tobytes(order="C"))


def read_depth_f32(path) -> DepthImage:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _F32_MAGIC:
            raise FormatError(f"{path}: not a depth image file")
        version, h, w = struct.unpack("<III", header[4:])
        if version != _F32_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = fh.read(4 * h * w)
        if len(payload) != 4 * h * w:
            raise FormatError(f"{path}: truncated payload")
    pixels = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)
    return DepthImage(pixels=pixels)
