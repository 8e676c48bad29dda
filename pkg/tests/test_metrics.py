import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgbd_refine.assets import icosphere_geometry
from rgbd_refine.metrics import (gaussian_window, hausdorff_avg, point_triangle_distance, psnr, sample_surface,
                                 ssim, to_gray)
from rgbd_refine.scene import TriMesh


def sphere(level=3, scale=1.0):
    v, f = icosphere_geometry(level)
    return TriMesh(v * scale, f, np.zeros((len(f), 3, 2)))


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(a, a) == 99.0
    b = np.clip(a, 0, 1 - 10 / 255) + 10 / 255
    c = np.clip(a, 0, 1 - 10 / 255)
    assert psnr(c, b) == pytest.approx(20 * np.log10(255 / 10), abs=1e-9)
    assert psnr(c, b) == pytest.approx(28.1308, abs=1e-4)
    d = a.copy()
    d[:4, :, 0] = 1 - d[:4, :, 0]
    mse = sum((a[i, j, k] - d[i, j, k]) ** 2 for i in range(8) for j in range(8) for k in range(3)) / a.size
    assert psnr(a, d) == pytest.approx(10 * np.log10(1 / mse), rel=1e-12)
    assert psnr(a, d) == psnr(d, a)


def ssim_direct(x, y):
    """Per-window loop SSIM on gray images (independent oracle)."""
    g = gaussian_window(11, 1.5)
    h, w = x.shape
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = (g * px).sum(), (g * py).sum()
            vx = (g * (px - mx) ** 2).sum()
            vy = (g * (py - my) ** 2).sum()
            cxy = (g * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_identity_exact():
    a = np.random.default_rng(1).uniform(size=(20, 20, 3))
    assert ssim(a, a) == 1.0


def test_ssim_inverted_binary_negative():
    a = (np.random.default_rng(2).uniform(size=(16, 16)) > 0.5).astype(float)
    s = ssim(a, 1 - a)
    assert s < 0
    assert s == pytest.approx(ssim_direct(a, 1 - a), abs=1e-10)


def test_ssim_offset_on_gradient():
    ramp = np.tile(np.linspace(0.1, 0.8, 24), (24, 1))
    s = ssim(ramp, ramp + 0.1)
    assert 0.5 < s < 1
    assert s == pytest.approx(ssim_direct(ramp, ramp + 0.1), abs=1e-10)


def test_ssim_matches_direct_on_color():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(18, 21, 3)), rng.uniform(size=(18, 21, 3))
    assert ssim(a, b) == pytest.approx(ssim_direct(to_gray(a), to_gray(b)), abs=1e-10)


def test_ssim_matches_scikit_image():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(32, 32))
    b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
    ref = metrics.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                        data_range=1.0, full=True)[1][5:-5, 5:-5].mean()
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_point_triangle_distance_regions():
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    cases = {
        (0.2, 0.2, 0.5): 0.5,          # interior face region
        (-1.0, -1.0, 0.0): np.sqrt(2),  # vertex a
        (2.0, 0.0, 0.0): 1.0,           # vertex b
        (0.0, 3.0, 1.0): np.sqrt(5),    # vertex c
        (0.5, -2.0, 0.0): 2.0,          # edge ab
        (-3.0, 0.5, 0.0): 3.0,          # edge ac
        (1.0, 1.0, 0.0): np.sqrt(0.5),  # edge bc
    }
    for p, d in cases.items():
        assert point_triangle_distance(np.array(p), a, b, c) == pytest.approx(d, abs=1e-12), p


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_point_triangle_distance_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 3))
    p = rng.normal(size=3) * 2
    # dense barycentric grid plus the three edges sampled finely
    s = np.linspace(0, 1, 301)
    uu, vv = np.meshgrid(s, s)
    keep = uu + vv <= 1
    pts = a + uu[keep, None] * (b - a) + vv[keep, None] * (c - a)
    brute = np.linalg.norm(pts - p, axis=1).min()
    exact = point_triangle_distance(p, a, b, c)
    assert exact <= brute + 1e-12
    assert brute - exact < 0.02 * max(1.0, np.linalg.norm(b - a) + np.linalg.norm(c - a))


def test_sample_surface_on_triangle():
    tri = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], np.zeros((1, 3, 2)))
    pts = sample_surface(tri, 5000, np.random.default_rng(0))
    assert (pts[:, 2] == 0).all() and (pts[:, :2] >= -1e-12).all() and (pts[:, :2].sum(1) <= 1 + 1e-12).all()
    # centroid of a uniform distribution on the triangle
    np.testing.assert_allclose(pts[:, :2].mean(0), [1 / 3, 1 / 3], atol=0.01)


def test_hausdorff_examples():
    m = sphere()
    assert hausdorff_avg(m, m, 2000) < 1e-6
    big = sphere(scale=1.1)
    assert hausdorff_avg(m, big, 3000) == pytest.approx(0.1, abs=0.01)
    assert hausdorff_avg(m, big, 500) == hausdorff_avg(big, m, 500)
