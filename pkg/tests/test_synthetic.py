import numpy as np
import pytest

from rgbd_refine.assets import atlas_uvs, cube_geometry, icosphere_geometry, make_shape
from rgbd_refine.metrics import psnr
from rgbd_refine.render import HARD, rasterize
from rgbd_refine.scene import (Pose, Texture, TriMesh, euler_xyz, look_at, project_point, rotation_angle,
                               uniform_laplacian, validate_mesh, validate_texture)
from rgbd_refine.synthetic import (NoiseSpec, corrupt_texture, default_intrinsics, generate_benchmark,
                                   neighbor_angle_for, perturb_geometry, perturb_poses, sample_sphere_views,
                                   smooth_field)


def test_noise_spec_bounds():
    s = NoiseSpec(1.0)
    assert s.e_t == pytest.approx(0.015) and s.e_r == 5.0 and s.e_g == pytest.approx(0.045)
    assert NoiseSpec(1.5).e_t == pytest.approx(0.01 * 1.5 ** 1.5)
    with pytest.raises(ValueError):
        NoiseSpec(-1)


def test_sphere_views():
    views = sample_sphere_views(40, 3.0)
    centers = np.array([p.center for p in views])
    np.testing.assert_allclose(np.linalg.norm(centers, axis=1), 3.0)
    d = np.linalg.norm(centers[:, None] - centers[None], axis=2) + np.eye(40) * 1e9
    assert d.min() > 0.3 * 3.0
    intr = default_intrinsics(128)
    for p in views:
        px, _ = project_point(p, intr, (0, 0, 0))
        np.testing.assert_allclose(px, (64, 64), atol=1e-3)
    two = sample_sphere_views(2)
    assert rotation_angle(two[0].rotation, two[1].rotation) > 90
    with pytest.raises(ValueError):
        sample_sphere_views(1)


def test_perturb_poses_bounds():
    poses = sample_sphere_views(40)
    spec = NoiseSpec(1.0, seed=3)
    noisy = perturb_poses(poses, spec)
    for p, q in zip(poses, noisy):
        assert np.abs(q.translation - p.translation).max() <= 0.015
        assert rotation_angle(p.rotation, q.rotation) <= 8.7
        assert q.orthonormality_error() < 1e-9
    same = perturb_poses(poses, NoiseSpec(1.0, translation_bound=0, rotation_bound=0))
    for p, q in zip(poses, same):
        np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-15)
    as_dict = perturb_poses(dict(enumerate(poses)), spec)
    assert all(np.array_equal(as_dict[i].rotation, noisy[i].rotation) for i in range(40))


def test_euler_sampled_bound():
    rng = np.random.default_rng(0)
    worst = 0.0
    for a in np.radians(rng.uniform(-5, 5, size=(20000, 3))):
        worst = max(worst, rotation_angle(np.eye(3), euler_xyz(*a)))
    assert 8.0 < worst <= 8.7
    # exact sign-mixed corners compose slightly past sqrt(3)*5
    corners = [rotation_angle(np.eye(3), euler_xyz(*np.radians([a, b, c])))
               for a in (-5, 5) for b in (-5, 5) for c in (-5, 5)]
    assert 8.7 < max(corners) < 8.8


def ico_mesh(level=2):
    v, f = icosphere_geometry(level)
    return TriMesh(v, f, atlas_uvs(len(f), 64))


def test_perturb_geometry():
    m = ico_mesh()
    assert np.array_equal(perturb_geometry(m, NoiseSpec(1.5, geometry_bound=0)).vertices, m.vertices)
    noisy = perturb_geometry(m, NoiseSpec(1.5, seed=2))
    assert np.array_equal(noisy.faces, m.faces)
    disp = np.linalg.norm(noisy.vertices - m.vertices, axis=1).mean()
    assert 0.01 <= disp <= 0.07


def test_smoothing_contracts():
    m = ico_mesh()
    rng = np.random.default_rng(5)
    for _ in range(20):
        raw = rng.uniform(-1, 1, size=(m.n_vertices, 3))
        assert np.abs(smooth_field(m, raw)).max() <= np.abs(raw).max() + 1e-12


def test_corrupt_texture():
    _, tex = make_shape("cube", "checker", 64)
    out = corrupt_texture(tex, seed=4)
    assert np.abs(out.texels - tex.texels).mean() > 0.01
    assert out.texels.min() >= 0 and out.texels.max() <= 1
    assert np.array_equal(corrupt_texture(tex, seed=4).texels, out.texels)
    assert not np.array_equal(corrupt_texture(tex, seed=5).texels, out.texels)
    with pytest.raises(ValueError):
        corrupt_texture(Texture(np.zeros((16, 16, 3))))


@pytest.mark.parametrize("shape", ["sphere", "cube"])
def test_assets_valid(shape):
    mesh, tex = make_shape(shape, "noise", 64)
    assert validate_mesh(mesh) == [] and validate_texture(tex) == []
    assert np.linalg.norm(mesh.vertices, axis=1).max() <= 1 + 1e-9
    w = uniform_laplacian(mesh)
    assert np.abs(w.sum(1)).max() < 1e-12


def test_icosphere_counts():
    for level, nv in [(0, 12), (1, 42), (2, 162), (3, 642)]:
        v, f = icosphere_geometry(level)
        assert len(v) == nv and len(f) == 20 * 4 ** level
    v, f = cube_geometry(2)
    assert len(f) == 6 * 2 * 2 * 2


def test_noiseless_benchmark_is_ground_truth():
    mesh, tex = make_shape("sphere", "noise", 64, 1)
    b = generate_benchmark(mesh, tex, NoiseSpec.noiseless(), view_count=4, resolution=32)
    assert np.array_equal(b.init.mesh.vertices, b.gt.mesh.vertices)
    assert np.array_equal(b.init.texture.texels, b.gt.texture.texels)
    for i in b.gt.poses:
        assert np.array_equal(b.init.poses[i].matrix(), b.gt.poses[i].matrix())


def test_benchmark_silhouette_rule_and_noise_level():
    mesh, tex = make_shape("sphere", "noise", 128, 2)
    b = generate_benchmark(mesh, tex, NoiseSpec(1.5, seed=1), view_count=6, resolution=64)
    intr = b.scanset.intrinsics
    for f in b.scanset.frames:
        out = rasterize(b.gt.mesh, b.gt.texture, b.gt.poses[f.id], intr, HARD).numpy()
        assert np.array_equal(f.silhouette, (out["silhouette"] > 0.5).astype(float))
        # frames carry the corrupted estimate, not the exact pose
        assert np.array_equal(f.pose.matrix(), b.init.poses[f.id].matrix())
    init_psnr = np.mean([psnr(np.clip(rasterize(b.init.mesh, b.init.texture, b.init.poses[f.id], intr, HARD)
                                      .numpy()["color"], 0, 1), f.color) for f in b.scanset.frames])
    assert init_psnr < 25


def test_benchmark_depth_matches_analytic_sphere():
    v, f = icosphere_geometry(5)
    mesh = TriMesh(v, f, atlas_uvs(len(f), 256, 0.2))
    tex = Texture(np.full((256, 256, 3), 0.5))
    b = generate_benchmark(mesh, tex, NoiseSpec.noiseless(), view_count=2, resolution=64)
    intr = b.scanset.intrinsics
    from scipy import ndimage
    for fr in b.scanset.frames:
        pose = b.gt.poses[fr.id]
        inner = ndimage.binary_erosion(fr.silhouette > 0, iterations=4)
        ys, xs = np.nonzero(inner)
        rays = np.stack([(xs + 0.5 - intr.cx) / intr.fx, (ys + 0.5 - intr.cy) / intr.fy, np.ones(len(xs))], 1)
        # camera-frame sphere center and ray-sphere intersection (unit radius)
        c = pose.translation
        bq = rays @ c
        aq = (rays ** 2).sum(1)
        t = (bq - np.sqrt(bq ** 2 - aq * (c @ c - 1))) / aq
        # icosphere chords sit slightly inside the sphere: sagitta at level 5 is ~ 1e-3
        assert np.abs(fr.depth[ys, xs] - t).max() < 1e-3


def test_neighbor_angle_for_gives_two_neighbors():
    poses = dict(enumerate(sample_sphere_views(16)))
    ang = neighbor_angle_for(poses)
    for a in poses:
        n = sum(rotation_angle(poses[a].rotation, poses[b].rotation) <= ang for b in poses if b != a)
        assert n >= 2
