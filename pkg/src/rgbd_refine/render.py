"""Soft rasterization of textured triangle meshes.

Coverage of a pixel by a face is ``sigmoid(+-d^2 / sigma)`` where ``d`` is the
distance from the pixel center to the projected triangle (positive inside),
measured in normalized screen units (``2 / max(W, H)`` per pixel). Faces are
blended with a softmax over normalized inverse depth at temperature ``gamma``
plus a constant background term. Only (pixel, face) pairs inside each face's
screen box grown by ``3 * sqrt(sigma)`` are evaluated; everything else has
coverage below ``sigmoid(-9)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import DTYPE
from .scene import Intrinsics, Pose, Texture, TriMesh

BACKGROUND_EPS = 1e-3
AREA_EPS = 1e-10


@dataclass(frozen=True)
class SoftParams:
    sigma: float = 1e-4
    gamma: float = 1e-4
    background_color: tuple = (0.0, 0.0, 0.0)
    znear: float = 0.05
    zfar: float = 100.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.gamma > 0):
            raise ValueError("sigma and gamma must be positive")
        if not 0 < self.znear < self.zfar:
            raise ValueError("need 0 < znear < zfar")


HARD = SoftParams(sigma=1e-6, gamma=1e-6)


@dataclass
class RenderOutput:
    color: torch.Tensor       # (H, W, 3)
    depth: torch.Tensor       # (H, W), 0 where nothing was hit
    silhouette: torch.Tensor  # (H, W) in [0, 1]

    def numpy(self) -> dict:
        return {
            "color": self.color.detach().numpy().copy(),
            "depth": self.depth.detach().numpy().copy(),
            "silhouette": self.silhouette.detach().numpy().copy(),
        }


def _bilinear_cf(tex_cf: torch.Tensor, h: int, w: int, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Channel-first bilinear lookup: ``tex_cf`` is (3, h*w), returns (3, n)."""
    x = (u * w - 0.5).clamp(0, w - 1)
    y = ((1 - v) * h - 0.5).clamp(0, h - 1)
    x0 = x.detach().floor().clamp(max=max(w - 2, 0))
    y0 = y.detach().floor().clamp(max=max(h - 2, 0))
    fx = x - x0
    fy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    c00 = tex_cf.index_select(1, y0 * w + x0)
    c01 = tex_cf.index_select(1, y0 * w + x1)
    c10 = tex_cf.index_select(1, y1 * w + x0)
    c11 = tex_cf.index_select(1, y1 * w + x1)
    gx = 1 - fx
    gy = 1 - fy
    return c00 * (gx * gy) + c01 * (fx * gy) + c10 * (gx * fy) + c11 * (fx * fy)


def _channel_first(texels: torch.Tensor) -> torch.Tensor:
    return texels.permute(2, 0, 1).reshape(3, -1)


def sample_texture(texels: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup with texel centers at ``(i + 0.5) / size``.

    ``v`` grows upward (row 0 is the top of the image). Coordinates outside
    the unit square are clamped to the border texels. ``uv`` is (..., 2);
    the result is (..., 3).
    """
    texels = torch.as_tensor(texels, dtype=DTYPE)
    uv = torch.as_tensor(uv, dtype=DTYPE)
    h, w = texels.shape[:2]
    flat = uv.reshape(-1, 2)
    out = _bilinear_cf(_channel_first(texels), h, w, flat[:, 0], flat[:, 1])
    return out.T.reshape(*uv.shape[:-1], 3)


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _segment_dist2(ax, ay, bx, by, px, py):
    dx, dy = bx - ax, by - ay
    length2 = (dx * dx + dy * dy).clamp_min(1e-30)
    t = (((px - ax) * dx + (py - ay) * dy) / length2).clamp(0, 1)
    ex = px - ax - t * dx
    ey = py - ay - t * dy
    return ex * ex + ey * ey


def _candidate_pairs(screen: np.ndarray, valid: np.ndarray, radius_px: float, width: int, height: int):
    """(pixel index, face index) pairs whose pixel center lies in the face's grown box."""
    lo = screen.min(axis=1) - radius_px
    hi = screen.max(axis=1) + radius_px
    # pixel j has center j + 0.5
    x0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = np.where(valid, nx * ny, 0)
    faces = np.flatnonzero(counts)
    counts = counts[faces]
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    face_of = np.repeat(faces, counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    nxf = nx[face_of]
    px = x0[face_of] + local % nxf
    py = y0[face_of] + local // nxf
    return py * width + px, face_of


def _drop_far_pairs(screen, pix, fid, radius_px, width):
    """Discard pairs whose pixel lies outside the face by more than ``radius_px``."""
    if len(pix) == 0:
        return pix, fid
    px = (pix % width) + 0.5
    py = (pix // width) + 0.5
    tri = screen[fid]
    d2 = np.full(len(pix), np.inf)
    for i in range(3):
        a, b = tri[:, i], tri[:, (i + 1) % 3]
        dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
        qx, qy = px - a[:, 0], py - a[:, 1]
        t = np.clip((qx * dx + qy * dy) / np.maximum(dx * dx + dy * dy, 1e-30), 0, 1)
        d2 = np.minimum(d2, (qx - t * dx) ** 2 + (qy - t * dy) ** 2)
    c = tri[:, 2]
    area = (tri[:, 1, 0] - tri[:, 0, 0]) * (c[:, 1] - tri[:, 0, 1]) - (tri[:, 1, 1] - tri[:, 0, 1]) * (c[:, 0] - tri[:, 0, 0])
    edges = np.stack([
        (tri[:, (i + 1) % 3, 0] - tri[:, i, 0]) * (py - tri[:, i, 1])
        - (tri[:, (i + 1) % 3, 1] - tri[:, i, 1]) * (px - tri[:, i, 0]) for i in range(3)], -1)
    inside = (edges * np.sign(area)[:, None] >= 0).all(-1)
    keep = inside | (d2 <= radius_px * radius_px * (1 + 1e-9))
    return pix[keep], fid[keep]


def render_tensors(vertices: torch.Tensor, faces: torch.Tensor, uvs: torch.Tensor, texels: torch.Tensor,
                   rotation: torch.Tensor, translation: torch.Tensor, intr: Intrinsics,
                   soft: SoftParams = SoftParams()) -> RenderOutput:
    """Differentiable render; gradients flow to vertices, texels, rotation and translation."""
    if not torch.isfinite(vertices).all():
        raise ValueError("non-finite vertex positions")
    h, w = intr.height, intr.width
    npix = h * w
    scale = 2.0 / max(w, h)
    faces = torch.as_tensor(faces, dtype=torch.long)

    p_cam = vertices @ rotation.T + translation
    z = p_cam[:, 2]
    in_front = z > soft.znear
    z_safe = torch.where(in_front, z, torch.ones_like(z))
    sx = intr.fx * p_cam[:, 0] / z_safe + intr.cx
    sy = intr.fy * p_cam[:, 1] / z_safe + intr.cy

    with torch.no_grad():
        fs = torch.stack([sx, sy], -1)[faces].numpy()
        f_front = in_front[faces].all(dim=1).numpy()
        a = fs[:, 0]
        b = fs[:, 1]
        c = fs[:, 2]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        valid = f_front & (np.abs(area) > AREA_EPS) & np.isfinite(fs).all(axis=(1, 2))
        radius_px = 3.0 * np.sqrt(soft.sigma) / scale
        pix, fid = _candidate_pairs(fs, valid, radius_px, w, h)
        pix, fid = _drop_far_pairs(fs, pix, fid, radius_px, w)

    bg = torch.tensor(soft.background_color, dtype=DTYPE)
    if len(pix) == 0:
        # keep the graph connected to every input so callers get zero gradients
        zero = (vertices.sum() + texels.sum() + rotation.sum() + translation.sum()) * 0.0
        color = bg.expand(h, w, 3) + zero
        return RenderOutput(color, torch.zeros(h, w, dtype=DTYPE) + zero, torch.zeros(h, w, dtype=DTYPE) + zero)

    pix_t = torch.from_numpy(pix)
    fid_t = torch.from_numpy(fid)
    px = torch.from_numpy((pix % w).astype(np.float64) + 0.5)
    py = torch.from_numpy((pix // w).astype(np.float64) + 0.5)

    fv = faces[fid_t]
    ax, ay = sx[fv[:, 0]], sy[fv[:, 0]]
    bx, by = sx[fv[:, 1]], sy[fv[:, 1]]
    cx, cy = sx[fv[:, 2]], sy[fv[:, 2]]
    za, zb, zc = z_safe[fv[:, 0]], z_safe[fv[:, 1]], z_safe[fv[:, 2]]

    area_t = _edge(ax, ay, bx, by, cx, cy)
    w0 = _edge(bx, by, cx, cy, px, py) / area_t
    w1 = _edge(cx, cy, ax, ay, px, py) / area_t
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)

    d2 = torch.minimum(torch.minimum(_segment_dist2(ax, ay, bx, by, px, py),
                                     _segment_dist2(bx, by, cx, cy, px, py)),
                       _segment_dist2(cx, cy, ax, ay, px, py)) * (scale * scale)
    x = torch.where(inside, d2, -d2) / soft.sigma
    log_cov = -F.softplus(-x)      # log d_j
    log_uncov = -F.softplus(x)     # log (1 - d_j)

    # clipped, renormalized, then perspective-corrected barycentrics
    b0, b1, b2 = w0.clamp(0, 1), w1.clamp(0, 1), w2.clamp(0, 1)
    bsum = b0 + b1 + b2
    b0, b1, b2 = b0 / (bsum * za), b1 / (bsum * zb), b2 / (bsum * zc)
    inv_depth = b0 + b1 + b2
    depth_j = 1.0 / inv_depth
    b0, b1, b2 = b0 * depth_j, b1 * depth_j, b2 * depth_j
    fuv = uvs[fid_t]
    u = b0 * fuv[:, 0, 0] + b1 * fuv[:, 1, 0] + b2 * fuv[:, 2, 0]
    v = b0 * fuv[:, 0, 1] + b1 * fuv[:, 1, 1] + b2 * fuv[:, 2, 1]
    col_j = _bilinear_cf(_channel_first(texels), texels.shape[0], texels.shape[1], u, v)  # (3, n)

    # depth of the face's plane along the pixel ray: clipped barycentrics would
    # pull near-edge neighbors toward the camera on curved surfaces. Never nearer
    # than the face's closest vertex, so edge-on faces cannot extrapolate far.
    plane_inv = w0 / za + w1 / zb + w2 / zc
    plane_depth = 1.0 / plane_inv.clamp(min=1.0 / soft.zfar)
    zlo = torch.minimum(torch.minimum(za, zb), zc)
    plane_depth = torch.where(inside, depth_j, torch.maximum(plane_depth, zlo))

    zn = (soft.zfar - plane_depth) / (soft.zfar - soft.znear)
    logit = log_cov + zn / soft.gamma
    bg_logit = BACKGROUND_EPS / soft.gamma
    with torch.no_grad():
        mx = torch.full((npix,), bg_logit, dtype=DTYPE)
        mx = mx.scatter_reduce(0, pix_t, logit.detach(), reduce="amax", include_self=True)
    wj = torch.exp(logit - mx[pix_t])
    w_bg = torch.exp(bg_logit - mx)

    wsum = torch.zeros(npix, dtype=DTYPE).index_add(0, pix_t, wj)
    cnum = torch.zeros(3, npix, dtype=DTYPE).index_add(1, pix_t, col_j * wj)
    dnum = torch.zeros(npix, dtype=DTYPE).index_add(0, pix_t, wj * plane_depth)
    luncov = torch.zeros(npix, dtype=DTYPE).index_add(0, pix_t, log_uncov)

    color = (cnum + bg.unsqueeze(-1) * w_bg) / (wsum + w_bg)
    hit = wsum > 0
    depth = torch.where(hit, dnum / torch.where(hit, wsum, torch.ones_like(wsum)), torch.zeros_like(wsum))
    sil = 1.0 - torch.exp(luncov)
    return RenderOutput(color.T.reshape(h, w, 3), depth.reshape(h, w), sil.reshape(h, w))


def mesh_tensors(mesh: TriMesh):
    return (torch.as_tensor(mesh.vertices, dtype=DTYPE), torch.as_tensor(mesh.faces, dtype=torch.long),
            torch.as_tensor(mesh.uvs, dtype=DTYPE))


def rasterize(mesh: TriMesh, texture: Texture, pose: Pose, intr: Intrinsics,
              soft: SoftParams = SoftParams()) -> RenderOutput:
    """Render a mesh/texture/pose value triple (no gradient bookkeeping)."""
    v, f, uv = mesh_tensors(mesh)
    return render_tensors(v, f, uv, torch.as_tensor(texture.texels, dtype=DTYPE),
                          torch.as_tensor(pose.rotation, dtype=DTYPE),
                          torch.as_tensor(pose.translation, dtype=DTYPE), intr, soft)
