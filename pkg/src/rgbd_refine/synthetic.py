"""Synthetic ground truth, noise corruption and benchmark generation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from . import io
from .render import HARD, SoftParams, rasterize
from .scene import (Intrinsics, Pose, RGBDFrame, ScanSet, TexturedModel, Texture, TriMesh, euler_xyz,
                    look_at, rotation_angle, uniform_laplacian)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise level ``degree`` and the bounds derived from it.

    ``e_t`` (meters) and ``e_g`` (unit-sphere-normalized units) grow as
    ``1.5 ** degree``; ``e_r`` is a fixed 5 degrees. Passing any bound
    explicitly overrides the derived value.
    """

    degree: float = 1.5
    seed: int = 0
    translation_bound: float | None = None
    rotation_bound: float | None = None
    geometry_bound: float | None = None
    corrupt_texture: bool = True

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("noise degree must be non-negative")

    @property
    def e_t(self) -> float:
        return 0.01 * 1.5 ** self.degree if self.translation_bound is None else self.translation_bound

    @property
    def e_r(self) -> float:
        return 5.0 if self.rotation_bound is None else self.rotation_bound

    @property
    def e_g(self) -> float:
        return 0.03 * 1.5 ** self.degree if self.geometry_bound is None else self.geometry_bound

    @classmethod
    def noiseless(cls, seed: int = 0) -> "NoiseSpec":
        return cls(0.0, seed, 0.0, 0.0, 0.0, False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(e_t=self.e_t, e_r=self.e_r, e_g=self.e_g)
        return d


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    y = 1 - 2 * i / count
    r = np.sqrt(1 - y * y)
    theta = math.pi * (3 - math.sqrt(5)) * i
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def sample_sphere_views(count: int = 40, radius: float = 3.0) -> list[Pose]:
    """Cameras on a Fibonacci spiral of the given radius, all looking at the origin."""
    if count < 2:
        raise ValueError("need at least two views")
    return [look_at(c * radius) for c in fibonacci_sphere(count)]


def default_intrinsics(resolution: int = 128, focal_scale: float = 1.2) -> Intrinsics:
    f = focal_scale * resolution
    return Intrinsics(f, f, resolution / 2, resolution / 2, resolution, resolution)


def perturb_poses(poses, spec: NoiseSpec):
    """Uniform translation noise per component and XYZ-Euler rotation noise.

    Accepts a list of poses or a dict keyed by frame id and returns the same kind.
    """
    rng = _rng(spec.seed, 1)
    items = poses.items() if isinstance(poses, dict) else enumerate(poses)
    out = {}
    for key, p in items:
        dt = rng.uniform(-spec.e_t, spec.e_t, size=3)
        ang = np.radians(rng.uniform(-spec.e_r, spec.e_r, size=3))
        out[key] = Pose(euler_xyz(*ang) @ p.rotation, p.translation + dt)
    return out if isinstance(poses, dict) else [out[i] for i in range(len(poses))]


def smooth_field(mesh: TriMesh, field: np.ndarray, steps: int = 3, weight: float = 0.5) -> np.ndarray:
    w = uniform_laplacian(mesh)
    for _ in range(steps):
        field = field - weight * (w @ field)
    return field


def perturb_geometry(mesh: TriMesh, spec: NoiseSpec) -> TriMesh:
    """Add a uniform random displacement field, smoothed by three Laplacian steps."""
    rng = _rng(spec.seed, 2)
    raw = rng.uniform(-spec.e_g, spec.e_g, size=mesh.vertices.shape)
    return mesh.with_vertices(mesh.vertices + smooth_field(mesh, raw))


def _random_polygon(rng, width, height, max_area_frac=0.05):
    n = int(rng.integers(3, 9))
    r_max = math.sqrt(max_area_frac * width * height / math.pi)
    cx, cy = rng.uniform(0, width), rng.uniform(0, height)
    ang = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    rad = rng.uniform(0.3, 1.0, size=n) * r_max
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(ang, rad)]


def corrupt_texture(texture: Texture, seed: int = 0, max_shift: float = 5.0, blur_sigma: float = 2.0,
                    polygons: int = 5, max_area_frac: float = 0.05) -> Texture:
    """Misalign (texel shift), blur, and stamp irregular mean-colored masks."""
    t = texture.texels
    if t.shape[0] < 32 or t.shape[1] < 32:
        raise ValueError("texture must be at least 32x32")
    rng = _rng(seed, 3)
    mean = t.reshape(-1, 3).mean(0)
    shift = rng.uniform(-max_shift, max_shift, size=2)
    out = ndimage.shift(t, (shift[1], shift[0], 0), order=1, mode="nearest")
    out = ndimage.gaussian_filter(out, sigma=(blur_sigma, blur_sigma, 0), mode="nearest")
    h, w = t.shape[:2]
    for _ in range(polygons):
        pts = _random_polygon(rng, w, h, max_area_frac)
        mask_img = Image.new("L", (w, h), 0)
        ImageDraw.Draw(mask_img).polygon(pts, fill=1)
        mask = np.asarray(mask_img, dtype=bool)
        out[mask] = mean
    return Texture(np.clip(out, 0.0, 1.0))


@dataclass(frozen=True)
class Benchmark:
    gt: TexturedModel
    init: TexturedModel
    scanset: ScanSet
    spec: NoiseSpec

    @property
    def gt_poses(self) -> dict:
        return self.gt.poses


def render_frames(model: TexturedModel, intr: Intrinsics, soft: SoftParams = HARD,
                  frame_poses: dict | None = None) -> list[RGBDFrame]:
    """Render color/depth/silhouette for each pose of ``model``.

    ``frame_poses`` sets the pose stored on each frame (defaults to the render pose).
    """
    frames = []
    for fid, pose in sorted(model.poses.items()):
        out = rasterize(model.mesh, model.texture, pose, intr, soft).numpy()
        sil = (out["silhouette"] > 0.5).astype(np.float64)
        depth = np.where(sil > 0, out["depth"], 0.0)
        stored = frame_poses[fid] if frame_poses is not None else pose
        frames.append(RGBDFrame(np.clip(out["color"], 0, 1), depth, sil, stored, fid))
    return frames


def generate_benchmark(gt_mesh: TriMesh, gt_texture: Texture, spec: NoiseSpec, view_count: int = 40,
                       resolution: int = 128, radius: float = 3.0) -> Benchmark:
    """Render a ground-truth scan set and build the corrupted starting model.

    Frames are rendered from the exact poses with near-hard settings; each
    frame records the *corrupted* pose, which is what a reconstruction
    pipeline would hand over as its estimate.
    """
    extent = np.linalg.norm(gt_mesh.vertices, axis=1).max()
    if extent > 1 + 1e-6:
        raise ValueError("ground-truth mesh must fit inside the unit sphere")
    intr = default_intrinsics(resolution)
    gt_poses = dict(enumerate(sample_sphere_views(view_count, radius)))
    gt = TexturedModel(gt_mesh, gt_texture, gt_poses)
    noisy_poses = perturb_poses(gt_poses, spec)
    mesh = perturb_geometry(gt_mesh, spec)
    texture = corrupt_texture(gt_texture, spec.seed) if spec.corrupt_texture else Texture(gt_texture.texels.copy())
    frames = render_frames(gt, intr, HARD, frame_poses=noisy_poses)
    return Benchmark(gt, TexturedModel(mesh, texture, noisy_poses), ScanSet(frames, intr), spec)


def neighbor_angle_for(poses: dict, min_neighbors: int = 2) -> float:
    """Smallest whole-degree angle giving every view at least ``min_neighbors`` neighbors."""
    ids = sorted(poses)
    worst = 0.0
    for a in ids:
        angles = sorted(rotation_angle(poses[a].rotation, poses[b].rotation) for b in ids if b != a)
        worst = max(worst, angles[min(min_neighbors, len(angles)) - 1])
    return float(math.ceil(worst + 1e-9))


# Settings for the 128 px sphere benchmarks. Sharp edges (sigma, gamma) keep
# the soft silhouette close to the scanned mask; light smoothing and small
# vertex/pose steps avoid drifting past the accuracy the scans support.
BENCHMARK_SETTINGS = {"sigma": 3e-6, "gamma": 3e-6, "lambda_lap": 0.01, "lr_vertices": 3e-4, "lr_pose": 3e-4}


def write_benchmark(directory, bench: Benchmark) -> None:
    """Directory with ``gt/`` and ``init/`` models, the scan set, spec.json and a suggested config."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.write_model(d / "gt", bench.gt)
    io.write_model(d / "init", bench.init)
    io.write_scanset(d, bench.scanset)
    (d / "spec.json").write_text(json.dumps(bench.spec.to_json(), indent=1))
    angle = max(15.0, neighbor_angle_for({f.id: f.pose for f in bench.scanset.frames}))
    (d / "config.txt").write_text(
        "# suggested settings for this benchmark\n"
        + "".join(f"{k} = {v:g}\n" for k, v in BENCHMARK_SETTINGS.items())
        + f"max_neighbor_angle = {angle:g}\n"
        f"seed = {bench.spec.seed}\n"
    )
