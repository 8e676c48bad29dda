"""Image and mesh quality metrics."""
from __future__ import annotations

import zlib

import numpy as np
from scipy.signal import convolve2d

from .scene import TriMesh

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must have equal shapes")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Gaussian-window SSIM on luma, averaged over window centers fully inside the image."""
    x = to_gray(a)
    y = to_gray(b)
    if x.shape != y.shape:
        raise ValueError("images must have equal shapes")
    if min(x.shape) < window:
        raise ValueError(f"images must be at least {window}x{window}")
    g = gaussian_window(window, sigma)

    def filt(img):
        return convolve2d(img, g, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def sample_surface(mesh: TriMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Points distributed uniformly by area over the mesh surface."""
    tri = mesh.vertices[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    face = rng.choice(len(tri), size=count, p=area / area.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    t = tri[face]
    return (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]


def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from points to triangles (broadcasting over leading axes).

    Closest-point classification by Voronoi region of the triangle.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        closest = a + v_in[..., None] * ab + w_in[..., None] * ac
        # edge ab
        t_ab = d1 / (d1 - d3)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        closest = np.where(on_ab[..., None], a + t_ab[..., None] * ab, closest)
        # edge ac
        t_ac = d2 / (d2 - d6)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        closest = np.where(on_ac[..., None], a + t_ac[..., None] * ac, closest)
        # edge bc
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        closest = np.where(on_bc[..., None], b + t_bc[..., None] * (c - b), closest)
    # vertex regions take priority
    at_a = (d1 <= 0) & (d2 <= 0)
    at_b = (d3 >= 0) & (d4 <= d3)
    at_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(at_a[..., None], a, closest)
    closest = np.where(at_b[..., None], b, closest)
    closest = np.where(at_c[..., None], c, closest)
    return np.linalg.norm(p - closest, axis=-1)


def points_to_mesh_distance(points: np.ndarray, mesh: TriMesh, chunk: int = 512) -> np.ndarray:
    tri = mesh.vertices[mesh.faces]
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk, None, :]
        out[s:s + chunk] = point_triangle_distance(p, a, b, c).min(axis=1)
    return out


def hausdorff_avg(mesh_a: TriMesh, mesh_b: TriMesh, samples: int = 10000, seed: int = 0) -> float:
    """Symmetric average surface distance: mean of the two directed mean distances.

    Each mesh's sample set depends only on ``seed`` and the mesh itself, so
    swapping the arguments gives the identical value.
    """
    pa = sample_surface(mesh_a, samples, np.random.default_rng([seed, _mesh_key(mesh_a)]))
    pb = sample_surface(mesh_b, samples, np.random.default_rng([seed, _mesh_key(mesh_b)]))
    da = points_to_mesh_distance(pa, mesh_b).mean()
    db = points_to_mesh_distance(pb, mesh_a).mean()
    return float(0.5 * (da + db))


def _mesh_key(mesh: TriMesh) -> int:
    return zlib.crc32(mesh.vertices.tobytes() + mesh.faces.tobytes())
