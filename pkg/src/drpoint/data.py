"""Triplet construction, synthetic shapes, augmentations, and file I/O.

A training triplet pairs a 2048-point cloud with a 224x224 RGB image and the
index of one depth view. RGB images come from files when a dataset provides
them and from a shaded depth render otherwise. All augmentations are pure
functions of (input, seed): the transform stream of a sample is derived from
the global seed and the object id, so dataset iteration order and worker
counts never change results.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DomainError, FormatError, ParseError
from .geometry import PointCloud, RenderConfig, generate_camera_poses, normalize_cloud
from .renderer import render_views_array
from .rng import stream

Array = np.ndarray

STORED_POINTS = 2048
ENCODER_POINTS = 1024
RGB_SIZE = 224
VIEW_COUNT = 32

SHAPE_FAMILIES = ("sphere", "box", "cylinder", "torus", "plane", "two_box")


@dataclass(frozen=True)
class Triplet:
    """One training unit: point cloud, RGB image, and a chosen depth view."""

    object_id: str
    cloud: PointCloud
    rgb: Array
    depth_view_index: int

    def __post_init__(self):
        if self.cloud.count != STORED_POINTS:
            raise DomainError(f"triplet clouds store exactly {STORED_POINTS} points")
        rgb = np.asarray(self.rgb, dtype=np.float64)
        if rgb.shape != (RGB_SIZE, RGB_SIZE, 3):
            raise DomainError(f"rgb must be {RGB_SIZE}x{RGB_SIZE}x3, got {rgb.shape}")
        if rgb.min() < 0.0 or rgb.max() > 1.0:
            raise DomainError("rgb values must lie in [0, 1]")
        if not 0 <= self.depth_view_index < VIEW_COUNT:
            raise DomainError(f"depth_view_index must lie in [0, {VIEW_COUNT})")
        object.__setattr__(self, "rgb", rgb)


def encoder_points(triplet: Triplet, seed: int, count: int = ENCODER_POINTS) -> PointCloud:
    """The seeded subsample fed to the encoder; fixed per (seed, object)."""
    if count > triplet.cloud.count:
        raise DomainError(f"cannot sample {count} from {triplet.cloud.count} points")
    idx = np.sort(
        stream(seed, "subsample", triplet.object_id).choice(
            triplet.cloud.count, size=count, replace=False
        )
    )
    return PointCloud(triplet.cloud.points[idx], source_indices=idx)


# -- synthetic shapes ---------------------------------------------------------------


def _sphere(rng, n: int, scale: float) -> Array:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * scale


def _box_points(rng, n: int, half: Array) -> Array:
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    areas = np.repeat(areas, 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        sel = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = uv[sel, 0] * half[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * half[others[1]]
    return pts


def _box(rng, n: int, scale: float) -> Array:
    return _box_points(rng, n, scale * rng.uniform(0.4, 1.0, size=3))


def _cylinder(rng, n: int, scale: float) -> Array:
    radius = scale * rng.uniform(0.3, 0.7)
    hh = scale * rng.uniform(0.4, 1.0)
    side_area = 2 * np.pi * radius * 2 * hh
    cap_area = 2 * np.pi * radius * radius
    on_side = rng.random(n) < side_area / (side_area + cap_area)
    theta = rng.uniform(0.0, 2 * np.pi, n)
    pts = np.empty((n, 3))
    pts[:, 0] = np.cos(theta) * radius
    pts[:, 1] = np.sin(theta) * radius
    pts[:, 2] = rng.uniform(-hh, hh, n)
    caps = ~on_side
    r = radius * np.sqrt(rng.random(caps.sum()))
    pts[caps, 0] = np.cos(theta[caps]) * r
    pts[caps, 1] = np.sin(theta[caps]) * r
    pts[caps, 2] = np.where(rng.random(caps.sum()) < 0.5, hh, -hh)
    return pts


def _torus(rng, n: int, scale: float) -> Array:
    major = scale * rng.uniform(0.5, 0.75)
    minor = major * rng.uniform(0.2, 0.45)
    u = rng.uniform(0.0, 2 * np.pi, n)
    v = rng.uniform(0.0, 2 * np.pi, n)
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def _plane(rng, n: int, scale: float) -> Array:
    half = scale * rng.uniform(0.5, 1.0, size=2)
    pts = np.zeros((n, 3))
    pts[:, 0] = rng.uniform(-half[0], half[0], n)
    pts[:, 1] = rng.uniform(-half[1], half[1], n)
    return pts


def _two_box(rng, n: int, scale: float) -> Array:
    n1 = n * 2 // 3
    base = _box_points(rng, n1, scale * np.array([0.9, 0.9, 0.35]))
    top_half = scale * np.array([0.4, 0.4, 0.3])
    top = _box_points(rng, n - n1, top_half)
    top[:, 2] += scale * 0.35 + top_half[2]
    return np.concatenate([base, top])


_GENERATORS = {
    "sphere": _sphere,
    "box": _box,
    "cylinder": _cylinder,
    "torus": _torus,
    "plane": _plane,
    "two_box": _two_box,
}


def synth_shapes(n: int, seed: int, points: int = STORED_POINTS) -> list[tuple[PointCloud, int]]:
    """Deterministic parametric shape sampler cycling through six families.

    Shapes are centered and axis-aligned with a per-instance random scale so
    that family invariants (constant sphere radius, box extents) stay
    directly checkable.
    """
    if n < 1:
        raise DomainError("need at least one shape")
    out = []
    for i in range(n):
        label = i % len(SHAPE_FAMILIES)
        family = SHAPE_FAMILIES[label]
        rng = stream(seed, "shape", i)
        scale = rng.uniform(0.5, 1.0)
        pts = _GENERATORS[family](rng, points, scale)
        out.append((PointCloud(pts), label))
    return out


# -- triplet construction ----------------------------------------------------------------


def _shaded_render(cloud: PointCloud, seed: int, object_id: str) -> Array:
    """A deterministic stand-in for dataset RGB renders: tinted inverse depth."""
    rng = stream(seed, "rgbview", object_id)
    view = int(rng.integers(VIEW_COUNT))
    tint = rng.uniform(0.5, 1.0, size=3)
    cfg = RenderConfig(grid_depth=32, image_height=RGB_SIZE, image_width=RGB_SIZE)
    poses = generate_camera_poses(2.0)
    image = render_views_array(normalize_cloud(cloud).points, [poses[view]], cfg)[0]
    return np.clip((1.0 - image)[:, :, None] * tint[None, None, :], 0.0, 1.0)


def make_triplet(
    cloud: PointCloud,
    rgb_source: Array | str | Path | None,
    seed: int,
    object_id: str = "obj",
    allow_synthesis: bool = True,
) -> Triplet:
    """Pair a cloud with one RGB view and a seeded depth view index.

    `rgb_source` may be an image array, a PNG path, or None; with None the
    RGB view is synthesized by shading a depth render of the cloud (unless
    synthesis is disabled, which is an error).
    """
    if cloud.count < STORED_POINTS:
        raise DomainError(f"need at least {STORED_POINTS} points, got {cloud.count}")
    if cloud.count > STORED_POINTS:
        idx = np.sort(
            stream(seed, "store", object_id).choice(cloud.count, STORED_POINTS, replace=False)
        )
        cloud = PointCloud(cloud.points[idx], source_indices=idx)
    if rgb_source is None:
        if not allow_synthesis:
            raise DomainError(f"{object_id}: no RGB source and synthesis disabled")
        rgb = _shaded_render(cloud, seed, object_id)
    elif isinstance(rgb_source, (str, Path)):
        rgb = load_png(rgb_source)
        if rgb.ndim == 2:
            rgb = np.repeat(rgb[:, :, None], 3, axis=2)
        if rgb.shape[:2] != (RGB_SIZE, RGB_SIZE):
            rgb = resize_bilinear(rgb, RGB_SIZE, RGB_SIZE)
    else:
        rgb = np.asarray(rgb_source, dtype=np.float64)
    view = int(stream(seed, "dview", object_id).integers(VIEW_COUNT))
    return Triplet(object_id=object_id, cloud=cloud, rgb=rgb, depth_view_index=view)


# -- augmentations ------------------------------------------------------------------------


def resize_bilinear(image: Array, height: int, width: int) -> Array:
    """Separable bilinear resize; the identity resize is an exact copy."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] == height and image.shape[1] == width:
        return image.copy()
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    hin, win = image.shape[:2]
    ys = (np.arange(height) + 0.5) * (hin / height) - 0.5
    xs = (np.arange(width) + 0.5) * (win / width) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, hin - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, win - 1)
    y1 = np.minimum(y0 + 1, hin - 1)
    x1 = np.minimum(x0 + 1, win - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return out[:, :, 0] if squeeze else out


def augment_rgb(
    image: Array,
    strength: float,
    seed: int,
    crop_area: tuple[float, float] = (0.6, 1.0),
    flip_prob: float = 0.5,
) -> Array:
    """Random resized crop, per-channel multiplicative jitter, horizontal flip.

    Applied in that order, all drawn deterministically from the seed.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (RGB_SIZE, RGB_SIZE, 3):
        raise DomainError(f"expected {RGB_SIZE}x{RGB_SIZE}x3 image, got {image.shape}")
    rng = stream(seed, "augment_rgb")
    area = rng.uniform(crop_area[0], crop_area[1])
    side = int(round(RGB_SIZE * np.sqrt(area)))
    side = max(1, min(side, RGB_SIZE))
    oy = int(rng.integers(RGB_SIZE - side + 1))
    ox = int(rng.integers(RGB_SIZE - side + 1))
    out = resize_bilinear(image[oy : oy + side, ox : ox + side], RGB_SIZE, RGB_SIZE)
    factors = rng.uniform(1.0 - strength, 1.0 + strength, size=3)
    out = np.clip(out * factors[None, None, :], 0.0, 1.0)
    if rng.random() < flip_prob:
        out = out[:, ::-1].copy()
    return out


def augment_cloud(
    cloud: PointCloud,
    seed: int,
    scale: float | None = None,
    translation: Array | None = None,
) -> PointCloud:
    """Uniform scale in [2/3, 3/2] and per-axis translation in [-0.2, 0.2].

    Explicit `scale`/`translation` override the seeded draws.
    """
    rng = stream(seed, "augment_cloud")
    drawn_scale = rng.uniform(2.0 / 3.0, 3.0 / 2.0)
    drawn_shift = rng.uniform(-0.2, 0.2, size=3)
    s = drawn_scale if scale is None else float(scale)
    t = drawn_shift if translation is None else np.asarray(translation, dtype=np.float64)
    return PointCloud(cloud.points * s + t, source_indices=cloud.source_indices)


# -- point cloud files ---------------------------------------------------------------------


def load_xyz(path) -> PointCloud:
    """ASCII x y z triples, one per line; '#' lines are comments."""
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 coordinates, got {len(parts)}", line=lineno)
            try:
                points.append([float(v) for v in parts])
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {line!r}", line=lineno) from None
    if not points:
        raise ParseError(f"{path}: no points found")
    return PointCloud(np.array(points, dtype=np.float64))


def save_xyz(cloud: PointCloud, path) -> None:
    """Writes 9 significant digits, enough to round trip at 1e-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


# -- PNG files ------------------------------------------------------------------------------


def load_png(path) -> Array:
    """8-bit PNG to floats in [0, 1]; (H, W) for grayscale, (H, W, 3) for RGB."""
    with Image.open(path) as img:
        if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
            raise FormatError(f"{path}: unsupported bit depth (mode {img.mode})")
        if img.mode == "L":
            return np.asarray(img, dtype=np.float64) / 255.0
        if img.mode in ("RGB", "RGBA", "P", "LA"):
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        raise FormatError(f"{path}: unsupported PNG mode {img.mode}")


def save_png(image: Array, path) -> None:
    """Floats in [0, 1] to an 8-bit grayscale or RGB PNG (value*255, rounded)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3):
        raise DomainError(f"image must be (H, W) or (H, W, 3), got {image.shape}")
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "L" if image.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path, format="PNG")


# -- datasets --------------------------------------------------------------------------------


def load_manifest(path) -> list[dict]:
    """JSON-lines records {id, cloud_path, rgb_path (optional)}."""
    records = []
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(rec, dict) or "id" not in rec or "cloud_path" not in rec:
                raise ParseError("record needs 'id' and 'cloud_path' fields", line=lineno)
            rec = dict(rec)
            rec["cloud_path"] = str(base / rec["cloud_path"])
            if rec.get("rgb_path"):
                rec["rgb_path"] = str(base / rec["rgb_path"])
            records.append(rec)
    if not records:
        raise ParseError(f"{path}: empty manifest")
    return records


def _build_one(args) -> Triplet:
    cloud, rgb_source, seed, object_id = args
    return make_triplet(cloud, rgb_source, seed, object_id=object_id)


def build_synth_dataset(n: int, seed: int, workers: int = 1) -> list[Triplet]:
    """`n` synthetic triplets; per-object seeding keeps any worker count
    byte-equivalent to a serial build."""
    shapes = synth_shapes(n, seed)
    jobs = [(cloud, None, seed, f"synth_{i:04d}") for i, (cloud, _) in enumerate(shapes)]
    if workers <= 1:
        return [_build_one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_build_one, jobs))


def build_manifest_dataset(path, seed: int, workers: int = 1) -> list[Triplet]:
    records = load_manifest(path)
    jobs = []
    for rec in records:
        cloud = load_xyz(rec["cloud_path"])
        jobs.append((cloud, rec.get("rgb_path"), seed, str(rec["id"])))
    if workers <= 1:
        return [_build_one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_build_one, jobs))
