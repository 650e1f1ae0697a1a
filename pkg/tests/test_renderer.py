"""Renderer oracles: hand values, a straight-line reference, and gradients."""

import math

import numpy as np
import pytest

from drpoint.autodiff import finite_differences, max_relative_error
from drpoint.errors import DomainError, FormatError
from drpoint.geometry import CameraPose, PointCloud, RenderConfig, generate_camera_poses
from drpoint.renderer import (
    DepthImage,
    OccupancyGrid,
    TerminationVolume,
    camera_to_index,
    index_to_camera,
    project_depth,
    project_depth_vjp,
    ray_termination,
    ray_termination_vjp,
    read_depth_f32,
    render,
    render_vjp,
    render_views_array,
    slice_depths,
    splat_occupancy,
    splat_occupancy_vjp,
    taper_width,
    write_depth_f32,
)

RNG = np.random.default_rng(3)


def reference_render(points, pose, cfg):
    """Straight-line reimplementation of all three stages with plain loops."""
    depth, height, width = cfg.grid_depth, cfg.image_height, cfg.image_width
    near, far = pose.near, pose.far
    trunc = cfg.truncation_radius
    delta = min(cfg.sigma, 0.5 * trunc)
    grid = np.zeros((depth, height, width))
    for p in points:
        cam = pose.rotation @ (p - pose.center)
        pz = (cam[2] - near) / (far - near) * depth - 0.5
        py = (1.0 - cam[1]) / 2.0 * height - 0.5
        px = (cam[0] + 1.0) / 2.0 * width - 0.5
        for d in range(depth):
            for r in range(height):
                for c in range(width):
                    dist = math.sqrt((d - pz) ** 2 + (r - py) ** 2 + (c - px) ** 2)
                    if dist > trunc:
                        continue
                    g = cfg.splat_scale * math.exp(-(dist**2) / (2 * cfg.sigma**2))
                    if dist > trunc - delta:
                        u = (trunc - dist) / delta
                        g *= u**3 * (u * (6 * u - 15) + 10)
                    grid[d, r, c] += g
    grid = np.clip(grid, 0.0, 1.0)
    image = np.zeros((height, width))
    for r in range(height):
        for c in range(width):
            survive = 1.0
            expected = 0.0
            for d in range(depth):
                t = grid[d, r, c] * survive
                expected += t * (d + 0.5) / depth
                survive *= 1.0 - grid[d, r, c]
            image[r, c] = expected + survive * cfg.background_depth
    return image


def small_cfg(**kw):
    base = dict(grid_depth=6, image_height=5, image_width=5)
    base.update(kw)
    return RenderConfig(**base)


# -- splatting ------------------------------------------------------------------


def test_splat_empty_cloud_is_zero():
    grid = splat_occupancy(PointCloud(np.zeros((0, 3))), small_cfg())
    assert np.array_equal(grid.values, np.zeros((6, 5, 5)))


def test_splat_point_at_voxel_center_gives_one():
    cfg = small_cfg()
    cam = index_to_camera(np.array([2.0, 2.0, 3.0]), cfg, 1.0, 3.0)
    grid = splat_occupancy(PointCloud(cam[None]), cfg)
    assert grid.values[2, 2, 3] == pytest.approx(1.0, abs=1e-15)


def test_splat_point_at_distance_sigma_gives_exp_half():
    # one voxel right of the point along the column axis: distance = sigma,
    # well inside the taper-free interior of the kernel
    cfg = small_cfg()
    cam = index_to_camera(np.array([2.0, 2.0, 2.0]), cfg, 1.0, 3.0)
    grid = splat_occupancy(PointCloud(cam[None]), cfg)
    assert grid.values[2, 2, 3] == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_splat_kernel_vanishes_continuously_at_truncation():
    cfg = small_cfg()
    base = np.array([2.0, 2.0, 0.0])
    for eps, bound in ((1e-3, 1e-8), (1e-6, 1e-17)):
        offset = base + [0.0, 0.0, cfg.truncation_radius - eps]
        cam = index_to_camera(offset, cfg, 1.0, 3.0)
        grid = splat_occupancy(PointCloud(cam[None]), cfg)
        assert 0.0 < grid.values[2, 2, 0] < bound


def test_splat_point_outside_volume_contributes_nothing():
    cfg = small_cfg()
    far_away = np.array([[50.0, 50.0, 50.0]])
    grid = splat_occupancy(PointCloud(far_away), cfg)
    assert np.array_equal(grid.values, np.zeros((6, 5, 5)))


def test_splat_clamps_to_one():
    cfg = small_cfg()
    cam = index_to_camera(np.array([2.0, 2.0, 2.0]), cfg, 1.0, 3.0)
    grid = splat_occupancy(PointCloud(np.repeat(cam[None], 5, axis=0)), cfg)
    assert grid.values.max() == 1.0


def test_splat_occupancy_monotone_in_points():
    cfg = small_cfg()
    pts = RNG.uniform(-0.8, 0.8, (6, 3))
    base = splat_occupancy(PointCloud(pts[:5]), cfg).values
    bigger = splat_occupancy(PointCloud(pts), cfg).values
    assert np.all(bigger >= base - 1e-15)


def test_splat_vjp_matches_finite_differences():
    cfg = small_cfg(splat_scale=0.15)
    pts = RNG.uniform(-0.6, 0.6, (4, 3))
    upstream = RNG.normal(size=(6, 5, 5))

    def f(x):
        return float(np.sum(splat_occupancy(PointCloud(x), cfg).values * upstream))

    analytic = splat_occupancy_vjp(PointCloud(pts), cfg, upstream)
    numeric = finite_differences(f, pts.copy(), h=1e-6)
    assert max_relative_error(analytic, numeric) < 1e-6


def test_splat_vjp_zero_where_clamped():
    cfg = small_cfg()
    cam = index_to_camera(np.array([2.0, 2.0, 2.0]), cfg, 1.0, 3.0)
    stacked = PointCloud(np.repeat(cam[None], 4, axis=0))  # raw = 4 > 1 at center
    upstream = np.zeros((6, 5, 5))
    upstream[2, 2, 2] = 1.0
    grad = splat_occupancy_vjp(stacked, cfg, upstream)
    assert np.array_equal(grad, np.zeros((4, 3)))


def test_coordinate_maps_are_inverse():
    cfg = small_cfg()
    idx = RNG.uniform(-1, 7, (20, 3))
    back = camera_to_index(index_to_camera(idx, cfg, 1.0, 3.0), cfg, 1.0, 3.0)
    assert np.max(np.abs(back - idx)) < 1e-12


# -- ray termination ---------------------------------------------------------------


def column_grid(values):
    """A (D, 1, 1) occupancy grid from a list of slice occupancies."""
    arr = np.array(values, dtype=np.float64).reshape(-1, 1, 1)
    return OccupancyGrid(values=arr, voxel_extent=1.0)


def test_ray_termination_hand_cases():
    term = ray_termination(column_grid([0.0, 0.0, 0.0]))
    assert np.allclose(term.values.ravel(), [0, 0, 0]) and term.residual[0, 0] == 1.0

    term = ray_termination(column_grid([1.0, 0.7]))
    assert np.allclose(term.values.ravel(), [1.0, 0.0]) and term.residual[0, 0] == 0.0

    term = ray_termination(column_grid([0.5, 0.5]))
    assert np.allclose(term.values.ravel(), [0.5, 0.25])
    assert term.residual[0, 0] == pytest.approx(0.25)


def test_ray_termination_sums_to_one():
    for seed in range(20):
        occ = np.random.default_rng(seed).uniform(0, 1, (8, 4, 3))
        term = ray_termination(OccupancyGrid(values=occ, voxel_extent=1.0))
        total = term.values.sum(axis=0) + term.residual
        assert np.max(np.abs(total - 1.0)) < 1e-9


def test_ray_termination_vjp_matches_finite_differences():
    occ = RNG.uniform(0.05, 0.9, (5, 3, 2))
    up_t = RNG.normal(size=(5, 3, 2))
    up_res = RNG.normal(size=(3, 2))

    def f(x):
        term = ray_termination(OccupancyGrid(values=x, voxel_extent=1.0))
        return float(np.sum(term.values * up_t) + np.sum(term.residual * up_res))

    analytic = ray_termination_vjp(OccupancyGrid(values=occ, voxel_extent=1.0), up_t, up_res)
    numeric = finite_differences(f, occ.copy(), h=1e-6)
    assert max_relative_error(analytic, numeric) < 1e-7


def test_termination_volume_invariant_enforced():
    with pytest.raises(DomainError):
        TerminationVolume(values=np.full((2, 1, 1), 0.9), residual=np.zeros((1, 1)))


# -- projection ----------------------------------------------------------------------


def test_project_point_mass_at_quarter_depth():
    cfg = small_cfg(grid_depth=2)  # slice depths 0.25 and 0.75
    values = np.zeros((2, 5, 5))
    values[0] = 1.0
    term = TerminationVolume(values=values, residual=np.zeros((5, 5)))
    assert np.allclose(project_depth(term, cfg).pixels, 0.25)


def test_project_background_only():
    cfg = small_cfg(background_depth=1.0)
    term = TerminationVolume(values=np.zeros((6, 5, 5)), residual=np.ones((5, 5)))
    assert np.allclose(project_depth(term, cfg).pixels, 1.0)


def test_project_hand_expectation():
    # t = [0.5, 0.25] at depths [0.25, 0.75], residual 0.25 at background 1
    cfg = RenderConfig(grid_depth=2, image_height=1, image_width=1, background_depth=1.0)
    term = TerminationVolume(
        values=np.array([0.5, 0.25]).reshape(2, 1, 1), residual=np.array([[0.25]])
    )
    assert project_depth(term, cfg).pixels[0, 0] == pytest.approx(0.5625)


def test_project_vjp_is_linear_map():
    cfg = small_cfg()
    upstream = RNG.normal(size=(5, 5))
    g_t, g_res = project_depth_vjp(cfg, upstream)
    z = slice_depths(cfg)
    assert np.allclose(g_t, upstream[None] * z[:, None, None])
    assert np.allclose(g_res, upstream * cfg.background_depth)


# -- full pipeline ----------------------------------------------------------------------


def test_render_deterministic_bit_identical():
    cfg = small_cfg()
    pose = generate_camera_poses(2.0)[9]
    cloud = PointCloud(RNG.uniform(-0.7, 0.7, (30, 3)))
    a = render(cloud, pose, cfg).pixels
    b = render(cloud, pose, cfg).pixels
    assert np.array_equal(a, b)


def test_render_rigid_frame_invariance():
    cfg = small_cfg()
    pose = generate_camera_poses(2.0)[4]
    shift = np.array([0.3, -0.2, 0.5])
    cloud = PointCloud(RNG.uniform(-0.6, 0.6, (25, 3)))
    moved_pose = CameraPose(
        rotation=pose.rotation, center=pose.center + shift, near=pose.near, far=pose.far
    )
    a = render(cloud, pose, cfg).pixels
    b = render(PointCloud(cloud.points + shift), moved_pose, cfg).pixels
    assert np.max(np.abs(a - b)) < 1e-9


def test_render_empty_cloud_is_background():
    cfg = small_cfg(background_depth=0.8)
    pose = generate_camera_poses(2.0)[0]
    image = render(PointCloud(np.zeros((0, 3))), pose, cfg)
    assert np.allclose(image.pixels, 0.8)


def test_render_matches_straight_line_reference():
    cfg = RenderConfig(grid_depth=16, image_height=8, image_width=8)
    pts = RNG.uniform(-0.7, 0.7, (5, 3))
    for pose in (generate_camera_poses(2.0)[2], generate_camera_poses(2.0)[26]):
        fast = render(PointCloud(pts), pose, cfg).pixels
        slow = reference_render(pts, pose, cfg)
        assert np.max(np.abs(fast - slow)) < 1e-12


def test_render_views_matches_single_pose_render():
    cfg = small_cfg()
    poses = generate_camera_poses(2.0)[:6]
    pts = RNG.uniform(-0.7, 0.7, (12, 3))
    stack = render_views_array(pts, poses, cfg)
    for t, pose in enumerate(poses):
        single = render(PointCloud(pts), pose, cfg).pixels
        assert np.max(np.abs(stack[t] - single)) < 1e-12


def test_render_vjp_zero_upstream_gives_zero():
    cfg = small_cfg()
    pose = generate_camera_poses(2.0)[1]
    cloud = PointCloud(RNG.uniform(-0.5, 0.5, (7, 3)))
    grad = render_vjp(cloud, pose, cfg, np.zeros((5, 5)))
    assert np.array_equal(grad, np.zeros((7, 3)))


def test_render_vjp_zero_for_point_outside_truncation():
    cfg = small_cfg()
    pose = generate_camera_poses(2.0)[0]
    pts = np.array([[0.0, 0.0, 0.0], [40.0, 40.0, 40.0]])
    grad = render_vjp(PointCloud(pts), pose, cfg, np.ones((5, 5)))
    assert np.array_equal(grad[1], np.zeros(3))
    assert np.any(grad[0] != 0.0)


def test_render_vjp_matches_finite_differences():
    cfg = RenderConfig(grid_depth=16, image_height=8, image_width=8, splat_scale=0.18)
    pose = generate_camera_poses(2.0)[7]
    pts = np.random.default_rng(1).uniform(-0.6, 0.6, (5, 3))
    upstream = np.random.default_rng(2).uniform(-1, 1, (8, 8))

    def f(x):
        return float(np.sum(render(PointCloud(x), pose, cfg).pixels * upstream))

    analytic = render_vjp(PointCloud(pts), pose, cfg, upstream)
    numeric = finite_differences(f, pts.copy(), h=1e-4)
    assert max_relative_error(analytic, numeric) < 1e-3


def test_render_vjp_rejects_bad_upstream_shape():
    cfg = small_cfg()
    pose = generate_camera_poses(2.0)[0]
    with pytest.raises(DomainError):
        render_vjp(PointCloud(np.zeros((1, 3))), pose, cfg, np.zeros((3, 3)))


# -- image types and files ------------------------------------------------------------------


def test_depth_image_range_enforced():
    with pytest.raises(DomainError):
        DepthImage(pixels=np.full((2, 2), 1.5))
    with pytest.raises(DomainError):
        DepthImage(pixels=np.array([[np.inf, 0.0]]))


def test_occupancy_grid_range_enforced():
    with pytest.raises(DomainError):
        OccupancyGrid(values=np.full((2, 2, 2), -0.5), voxel_extent=1.0)


def test_f32_file_round_trip(tmp_path):
    image = DepthImage(pixels=RNG.uniform(0, 1, (6, 9)).astype(np.float32).astype(np.float64))
    path = tmp_path / "view.f32"
    write_depth_f32(image, path)
    data = path.read_bytes()
    assert data[:4] == b"DRPT"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:12], "little") == 6
    assert int.from_bytes(data[12:16], "little") == 9
    assert len(data) == 16 + 4 * 6 * 9
    back = read_depth_f32(path)
    assert np.array_equal(back.pixels, image.pixels)


def test_f32_file_errors(tmp_path):
    bad = tmp_path / "bad.f32"
    bad.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(FormatError):
        read_depth_f32(bad)
    image = DepthImage(pixels=np.zeros((4, 4)))
    path = tmp_path / "trunc.f32"
    write_depth_f32(image, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        read_depth_f32(path)
    wrong_version = tmp_path / "v9.f32"
    payload = bytearray(b"DRPT")
    payload += (9).to_bytes(4, "little") + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    payload += b"\x00" * 4
    wrong_version.write_bytes(bytes(payload))
    with pytest.raises(FormatError):
        read_depth_f32(wrong_version)
