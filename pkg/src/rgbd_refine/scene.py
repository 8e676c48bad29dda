"""Geometric and image data types plus basic camera math.

All types are frozen dataclasses over numpy arrays. Poses map world
coordinates to camera coordinates: ``p_cam = R @ p_world + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


class BehindCameraError(ValueError):
    """Raised when a point projects with non-positive camera depth."""


MIN_DEPTH = 1e-8
ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh with per-face-corner (wedge) UVs.

    Attributes:
        vertices: (m, 3) float array, world frame, meters.
        faces: (f, 3) int array of vertex indices.
        uvs: (f, 3, 2) float array of texture coordinates in [0, 1].
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "uvs", np.asarray(self.uvs, dtype=np.float64).reshape(-1, 3, 2))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(np.array(vertices, dtype=np.float64), self.faces, self.uvs)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


@dataclass(frozen=True)
class Texture:
    """RGB texel grid, values in [0, 1], shape (height, width, 3)."""

    texels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "texels", np.asarray(self.texels, dtype=np.float64))

    @property
    def height(self) -> int:
        return self.texels.shape[0]

    @property
    def width(self) -> int:
        return self.texels.shape[1]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not (self.orthonormality_error() < ORTHO_TOL and np.linalg.det(self.rotation) > 0):
            raise ValueError("pose rotation must be orthonormal with determinant +1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def orthonormality_error(self) -> float:
        return float(np.abs(self.rotation.T @ self.rotation - np.eye(3)).max())


@dataclass(frozen=True)
class PoseDelta:
    """Optimizable increment: effective pose is ``exp(axis_angle) @ R``, ``t + translation``."""

    axis_angle: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        aa = np.asarray(self.axis_angle, dtype=np.float64).reshape(3)
        if np.linalg.norm(aa) >= np.pi:
            raise ValueError("axis-angle magnitude must be below pi")
        object.__setattr__(self, "axis_angle", aa)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply_to(self, pose: Pose) -> Pose:
        rot = orthonormalize(axis_angle_to_matrix(self.axis_angle) @ pose.rotation)
        return Pose(rot, pose.translation + self.translation)


@dataclass(frozen=True)
class RGBDFrame:
    """One scanned view.

    Attributes:
        color: (H, W, 3) in [0, 1].
        depth: (H, W) meters, 0 marks invalid depth.
        silhouette: (H, W) binary object mask.
        pose: estimated world-to-camera pose.
        id: integer frame identifier.
    """

    color: np.ndarray
    depth: np.ndarray
    silhouette: np.ndarray
    pose: Pose
    id: int

    def __post_init__(self):
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        object.__setattr__(self, "depth", np.asarray(self.depth, dtype=np.float64))
        object.__setattr__(self, "silhouette", (np.asarray(self.silhouette) > 0.5).astype(np.float64))
        h, w = self.depth.shape
        if self.color.shape != (h, w, 3) or self.silhouette.shape != (h, w):
            raise ValueError("color, depth and silhouette must share one image size")
        if (self.depth < 0).any():
            raise ValueError("depth must be non-negative")


@dataclass(frozen=True)
class ScanSet:
    frames: tuple
    intrinsics: Intrinsics

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        ids = [f.id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError("frame ids must be unique")
        if len(self.frames) < 2:
            raise ValueError("a scan set needs at least two frames")
        for f in self.frames:
            if f.depth.shape != self.intrinsics.shape:
                raise ValueError(f"frame {f.id} does not match the intrinsics image size")

    @property
    def ids(self) -> list[int]:
        return [f.id for f in self.frames]

    def frame(self, frame_id: int) -> RGBDFrame:
        for f in self.frames:
            if f.id == frame_id:
                return f
        raise KeyError(f"no frame with id {frame_id}")

    def index_of(self, frame_id: int) -> int:
        return self.ids.index(frame_id)


def validate_mesh(mesh: TriMesh) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    problems = []
    m = mesh.n_vertices
    if mesh.n_faces < 1:
        problems.append("mesh has no faces")
    if not np.isfinite(mesh.vertices).all():
        problems.append("mesh has non-finite vertex coordinates")
    if mesh.uvs.shape[0] != mesh.n_faces:
        problems.append(f"uv count {mesh.uvs.shape[0]} does not match face count {mesh.n_faces}")
    for fi, face in enumerate(mesh.faces):
        for idx in face:
            if idx < 0 or idx >= m:
                problems.append(f"face {fi} references vertex {idx} outside [0, {m})")
        seen = set()
        for idx in face:
            if idx in seen:
                problems.append(f"face {fi} repeats vertex {idx}")
                break
            seen.add(idx)
    bad = np.argwhere((mesh.uvs < 0) | (mesh.uvs > 1) | ~np.isfinite(mesh.uvs))
    for fi, corner, comp in bad:
        problems.append(
            f"face {fi} corner {corner} uv component {comp} = {mesh.uvs[fi, corner, comp]:g} outside [0, 1]"
        )
    return problems


def validate_texture(texture: Texture) -> list[str]:
    problems = []
    t = texture.texels
    if t.ndim != 3 or t.shape[2] != 3:
        problems.append(f"texture must be (H, W, 3), got {t.shape}")
        return problems
    if texture.width < 2 or texture.height < 2:
        problems.append("texture must be at least 2x2")
    if not np.isfinite(t).all() or t.min() < 0 or t.max() > 1:
        problems.append("texture values must lie in [0, 1]")
    return problems


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges (i < j) of a face list."""
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def uniform_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Uniform graph Laplacian: 1 on the diagonal, -1/deg(i) per neighbor.

    Rows of isolated vertices are zero.
    """
    m = mesh.n_vertices
    e = mesh_edges(mesh.faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    deg = np.bincount(rows, minlength=m).astype(np.float64)
    off = -1.0 / deg[rows]
    diag_idx = np.flatnonzero(deg > 0)
    rows = np.concatenate([rows, diag_idx])
    cols = np.concatenate([cols, diag_idx])
    vals = np.concatenate([off, np.ones(len(diag_idx))])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(m, m))


def rotation_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Angle in degrees of the relative rotation between two rotation matrices."""
    r = np.asarray(ra).T @ np.asarray(rb)
    c = (np.trace(r) - 1.0) / 2.0
    # atan2 keeps precision near 0 and 180 degrees, where arccos does not
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def project_point(pose: Pose, intr: Intrinsics, p_world) -> tuple[np.ndarray, float]:
    """Project a world point to a pixel (x right, y down) and its camera depth."""
    p = pose.rotation @ np.asarray(p_world, dtype=np.float64) + pose.translation
    z = p[2]
    if z <= MIN_DEPTH:
        raise BehindCameraError(f"point has camera depth {z:g}")
    return np.array([intr.fx * p[0] / z + intr.cx, intr.fy * p[1] / z + intr.cy]), float(z)


def unproject(pose: Pose, intr: Intrinsics, pixel, depth: float) -> np.ndarray:
    """Inverse of :func:`project_point`: world point at ``depth`` along the pixel ray."""
    q = np.array([pixel[0], pixel[1], 1.0])
    p_cam = depth * (np.linalg.inv(intr.matrix) @ q)
    return pose.rotation.T @ (p_cam - pose.translation)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(aa) -> np.ndarray:
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa)
    if theta < 1e-12:
        return np.eye(3) + skew(aa)
    k = skew(aa / theta)
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (SVD projection, determinant +1)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def euler_xyz(ax: float, ay: float, az: float) -> np.ndarray:
    """Rotation from Euler angles in radians, applied about x, then y, then z."""
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose for a camera at ``center`` looking at ``target``.

    Camera axes: +z forward, +x right, +y down (image convention).
    """
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(fwd, up)) < 1e-6:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return Pose(rot, -rot @ center)


@dataclass(frozen=True)
class TexturedModel:
    """Everything the optimizer refines: geometry, texture and one pose per frame id."""

    mesh: TriMesh
    texture: Texture
    poses: dict

    def copy(self) -> "TexturedModel":
        return TexturedModel(
            TriMesh(self.mesh.vertices.copy(), self.mesh.faces.copy(), self.mesh.uvs.copy()),
            Texture(self.texture.texels.copy()),
            {k: Pose(p.rotation.copy(), p.translation.copy()) for k, p in self.poses.items()},
        )
