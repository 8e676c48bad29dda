"""Built-in ground-truth meshes and procedural textures.

Meshes carry a per-face atlas parameterization: every face gets its own
right-triangle chart inside a grid cell, with a gutter so bilinear lookups
never bleed into a neighboring chart. Textures are baked by evaluating a 3D
color field at the surface point behind each texel.
"""
from __future__ import annotations

import math

import numpy as np

from .scene import Texture, TriMesh


def icosphere_geometry(subdivisions: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere: 12 vertices at level 0, 42 at 1, 162 at 2, 642 at 3 ..."""
    phi = (1 + 5 ** 0.5) / 2
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(v), np.array(faces, dtype=np.int64)


def cube_geometry(divisions: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Cube inscribed in the unit sphere, each side split into a grid."""
    n = divisions
    index: dict[tuple[int, int, int], int] = {}
    verts, faces = [], []

    def vid(ijk):
        if ijk not in index:
            index[ijk] = len(verts)
            verts.append(ijk)
        return index[ijk]

    for axis in range(3):
        for side in (0, n):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            for i in range(n):
                for j in range(n):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis] = side
                        p[u_ax] = i + di
                        p[v_ax] = j + dj
                        quad.append(vid(tuple(p)))
                    a, b, c, d = quad
                    faces += [(a, b, c), (a, c, d)]
    v = np.array(verts, dtype=np.float64) / n * 2 - 1
    return v / math.sqrt(3), np.array(faces, dtype=np.int64)


def atlas_uvs(n_faces: int, texture_size: int, gutter_texels: float = 1.5) -> np.ndarray:
    """One right-triangle chart per face on a square grid of cells."""
    g = math.ceil(math.sqrt(n_faces))
    cell = 1.0 / g
    m = gutter_texels / texture_size
    uvs = np.zeros((n_faces, 3, 2))
    for f in range(n_faces):
        r, c = divmod(f, g)
        u0, v0 = c * cell, r * cell
        uvs[f] = [(u0 + m, v0 + m), (u0 + cell - m, v0 + m), (u0 + m, v0 + cell - m)]
    return uvs


def bake_texture(mesh: TriMesh, color_fn, size: int) -> Texture:
    """Evaluate ``color_fn(points) -> rgb`` at the surface point of every texel.

    Texels in a chart's gutter take the color of the nearest chart point
    (clamped barycentrics).
    """
    g = math.ceil(math.sqrt(mesh.n_faces))
    rows, cols = np.mgrid[0:size, 0:size]
    u = (cols + 0.5) / size
    v = 1.0 - (rows + 0.5) / size
    cell_c = np.minimum((u * g).astype(int), g - 1)
    cell_r = np.minimum((v * g).astype(int), g - 1)
    face = cell_r * g + cell_c
    inside = face < mesh.n_faces
    face = np.where(inside, face, 0)
    tri = mesh.uvs[face]  # (S, S, 3, 2)
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    p = np.stack([u, v], -1)
    # barycentrics of the uv point within the chart
    det = (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])
    l1 = ((p[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (p[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])) / det
    l2 = ((b[..., 0] - a[..., 0]) * (p[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (p[..., 0] - a[..., 0])) / det
    bary = np.stack([1 - l1 - l2, l1, l2], -1).clip(0, None)
    bary /= bary.sum(-1, keepdims=True)
    corners = mesh.vertices[mesh.faces[face]]  # (S, S, 3, 3)
    pts = (bary[..., None] * corners).sum(-2)
    rgb = np.asarray(color_fn(pts.reshape(-1, 3))).reshape(size, size, 3)
    rgb = np.where(inside[..., None], rgb, 0.5)
    return Texture(np.clip(rgb, 0.0, 1.0))


def noise_color_field(seed: int = 0, octaves: int = 3, waves: int = 6):
    """Smooth multi-octave color field built from random 3D plane waves."""
    rng = np.random.default_rng(seed)
    params = []
    for o in range(octaves):
        freq = 2.0 * 2 ** o
        dirs = rng.normal(size=(waves, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        phase = rng.uniform(0, 2 * np.pi, size=(waves, 3))
        amp = rng.normal(size=(waves, 3)) / (2 ** o)
        params.append((freq * dirs, phase, amp))
    base = rng.uniform(0.3, 0.7, size=3)

    def field(points):
        points = np.asarray(points, dtype=np.float64)
        out = np.zeros((len(points), 3))
        for k, phase, amp in params:
            s = points @ k.T  # (n, waves)
            out += (np.sin(s[:, :, None] + phase[None]) * amp[None]).sum(1)
        out /= np.sqrt(waves)
        return base + 0.25 * np.tanh(out)

    return field


def checker_color_field(cells: float = 4.0, low=(0.1, 0.2, 0.6), high=(0.95, 0.85, 0.3)):
    low, high = np.asarray(low, float), np.asarray(high, float)

    def field(points):
        k = np.floor(np.asarray(points) * cells).astype(int).sum(1) % 2
        return np.where(k[:, None] == 1, high, low)

    return field


def make_shape(shape: str = "sphere", texture: str = "noise", texture_size: int = 256,
               subdivisions: int = 2, seed: int = 0) -> tuple[TriMesh, Texture]:
    """Ground-truth asset: ``sphere`` (icosphere) or ``cube``, with a baked texture."""
    if shape == "sphere":
        v, f = icosphere_geometry(subdivisions)
    elif shape == "cube":
        v, f = cube_geometry(max(1, 2 ** subdivisions))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    mesh = TriMesh(v, f, atlas_uvs(len(f), texture_size))
    if texture == "noise":
        fn = noise_color_field(seed)
    elif texture == "checker":
        fn = checker_color_field()
    else:
        raise ValueError(f"unknown texture {texture!r}")
    return mesh, bake_texture(mesh, fn, texture_size)
