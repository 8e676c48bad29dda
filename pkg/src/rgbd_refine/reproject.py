"""Depth-based warping of an auxiliary view into a target view."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .scene import MIN_DEPTH, BehindCameraError, Intrinsics, Pose, RGBDFrame, ScanSet, rotation_angle

DEPTH_TOLERANCE = 0.01
MIN_SPLAT_WEIGHT = 0.25


class NoNeighborsError(LookupError):
    """The target view has no auxiliary view within the angle limit."""


@dataclass(frozen=True)
class ReprojectedImage:
    color: np.ndarray     # (H, W, 3); meaningless where validity == 0
    validity: np.ndarray  # (H, W) in {0, 1}
    depth: np.ndarray     # (H, W) warped depth in the target camera, 0 where invalid


def neighbor_views(target_id: int, scanset: ScanSet, max_angle: float = 15.0, poses: dict | None = None) -> list[int]:
    """Ids of frames whose camera rotation is within ``max_angle`` degrees of the target.

    ``poses`` optionally overrides frame poses (id -> Pose).
    """
    def rot(fid):
        return (poses[fid] if poses is not None else scanset.frame(fid).pose).rotation

    ra = rot(target_id)
    out = [f.id for f in scanset.frames if f.id != target_id and rotation_angle(ra, rot(f.id)) <= max_angle]
    if not out:
        raise NoNeighborsError(f"frame {target_id} has no neighbor within {max_angle} degrees")
    return out


def reproject_pixel(q_b, d_b: float, intr: Intrinsics, pose_a: Pose, pose_b: Pose) -> tuple[np.ndarray, float]:
    """Map pixel ``q_b`` with depth ``d_b`` in view B to a continuous pixel and depth in view A."""
    if not d_b > 0:
        raise ValueError("source depth must be positive")
    pix, depth = reproject_points(np.asarray(q_b, dtype=np.float64)[None], np.array([d_b]), intr, pose_a, pose_b)
    if depth[0] <= MIN_DEPTH:
        raise BehindCameraError(f"reprojected depth {depth[0]:g}")
    return pix[0], float(depth[0])


def reproject_points(q_b: np.ndarray, d_b: np.ndarray, intr: Intrinsics, pose_a: Pose, pose_b: Pose):
    """Vectorized ``K P_A P_B^-1 (d K^-1 q)``; returns (pixels (n, 2), depths (n,))."""
    k = intr.matrix
    q = np.concatenate([q_b, np.ones((len(q_b), 1))], axis=1)
    cam_b = (q @ np.linalg.inv(k).T) * d_b[:, None]
    rel = pose_a.matrix() @ pose_b.inverse().matrix()
    cam_a = cam_b @ rel[:3, :3].T + rel[:3, 3]
    z = cam_a[:, 2]
    zs = np.where(np.abs(z) > MIN_DEPTH, z, 1.0)
    pix = (cam_a @ k.T)[:, :2] / zs[:, None]
    return pix, z


def reproject_image(frame_b: RGBDFrame, frame_a: RGBDFrame, intr: Intrinsics,
                    depth_tolerance: float = DEPTH_TOLERANCE) -> ReprojectedImage:
    """Forward-splat frame B's colors into frame A.

    Each valid-depth pixel of B lands at a continuous position in A and is
    spread over the four surrounding pixels with bilinear weights. Per target
    pixel only samples within ``depth_tolerance`` of the nearest one are
    blended. A pixel is valid when its accumulated weight is at least 0.25
    and, where A has a depth reading, the warped depth does not exceed it by
    more than ``depth_tolerance``.
    """
    h, w = intr.height, intr.width
    rows, cols = np.nonzero(frame_b.depth > 0)
    empty = ReprojectedImage(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)))
    if len(rows) == 0:
        return empty
    q = np.stack([cols + 0.5, rows + 0.5], axis=1)
    pix, z = reproject_points(q, frame_b.depth[rows, cols], intr, frame_a.pose, frame_b.pose)
    colors = frame_b.color[rows, cols]
    front = z > MIN_DEPTH
    pix, z, colors = pix[front], z[front], colors[front]

    gx = pix[:, 0] - 0.5
    gy = pix[:, 1] - 0.5
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0
    tx, ty, tw = [], [], []
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        tx.append(x0 + dx)
        ty.append(y0 + dy)
        tw.append(wt)
    tx = np.concatenate(tx)
    ty = np.concatenate(ty)
    tw = np.concatenate(tw)
    src = np.tile(np.arange(len(z)), 4)
    keep = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h) & (tw > 1e-12)
    tx, ty, tw, src = tx[keep], ty[keep], tw[keep], src[keep]
    if len(src) == 0:
        return empty
    tgt = ty * w + tx
    zs = z[src]

    zmin = np.full(h * w, np.inf)
    np.minimum.at(zmin, tgt, zs)
    front_layer = zs <= zmin[tgt] + depth_tolerance
    tgt, tw, src, zs = tgt[front_layer], tw[front_layer], src[front_layer], zs[front_layer]

    wsum = np.bincount(tgt, weights=tw, minlength=h * w)
    csum = np.stack([np.bincount(tgt, weights=tw * colors[src, c], minlength=h * w) for c in range(3)], -1)
    dsum = np.bincount(tgt, weights=tw * zs, minlength=h * w)
    got = wsum > 0
    color = np.where(got[:, None], csum / np.where(got, wsum, 1.0)[:, None], 0.0)
    depth = np.where(got, dsum / np.where(got, wsum, 1.0), 0.0)

    da = frame_a.depth.reshape(-1)
    occluded = (da > 0) & (zmin > da + depth_tolerance)
    valid = got & (wsum >= MIN_SPLAT_WEIGHT) & ~occluded
    color = np.where(valid[:, None], color, 0.0)
    depth = np.where(valid, depth, 0.0)
    return ReprojectedImage(color.reshape(h, w, 3), valid.reshape(h, w).astype(np.float64), depth.reshape(h, w))


@dataclass(frozen=True)
class SplatLayout:
    """Which source samples feed which target pixels, fixed for one set of poses.

    Built from detached values so that the z-buffer and validity decisions
    are piecewise constant; only the bilinear weights carry gradients.
    """

    rows: np.ndarray       # source pixel rows (n,)
    cols: np.ndarray       # source pixel cols (n,)
    corner: np.ndarray     # which of the four bilinear corners (m,)
    src: np.ndarray        # index into rows/cols (m,)
    tgt: np.ndarray        # flat target pixel (m,)
    validity: np.ndarray   # (H, W)


def _splat_layout(frame_b: RGBDFrame, frame_a: RGBDFrame, intr: Intrinsics, depth_tolerance: float):
    h, w = intr.height, intr.width
    rows, cols = np.nonzero(frame_b.depth > 0)
    q = np.stack([cols + 0.5, rows + 0.5], axis=1)
    pix, z = reproject_points(q, frame_b.depth[rows, cols], intr, frame_a.pose, frame_b.pose)
    front = z > MIN_DEPTH
    rows, cols, pix, z = rows[front], cols[front], pix[front], z[front]
    gx, gy = pix[:, 0] - 0.5, pix[:, 1] - 0.5
    x0, y0 = np.floor(gx).astype(np.int64), np.floor(gy).astype(np.int64)
    fx, fy = gx - x0, gy - y0
    wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    tx = np.concatenate([x0 + dx for dx, _ in _CORNERS])
    ty = np.concatenate([y0 + dy for _, dy in _CORNERS])
    tw = np.concatenate(wts)
    corner = np.repeat(np.arange(4), len(z))
    src = np.tile(np.arange(len(z)), 4)
    keep = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h) & (tw > 1e-12)
    tx, ty, tw, src, corner = tx[keep], ty[keep], tw[keep], src[keep], corner[keep]
    tgt = ty * w + tx
    zs = z[src]
    zmin = np.full(h * w, np.inf)
    np.minimum.at(zmin, tgt, zs)
    layer = zs <= zmin[tgt] + depth_tolerance
    tgt, tw, src, corner = tgt[layer], tw[layer], src[layer], corner[layer]
    wsum = np.bincount(tgt, weights=tw, minlength=h * w)
    da = frame_a.depth.reshape(-1)
    occluded = (da > 0) & (zmin > da + depth_tolerance)
    valid = (wsum > 0) & (wsum >= MIN_SPLAT_WEIGHT) & ~occluded
    use = valid[tgt]
    return SplatLayout(rows, cols, corner[use], src[use], tgt[use], valid.reshape(h, w).astype(np.float64))


_CORNERS = ((0, 0), (1, 0), (0, 1), (1, 1))


def reproject_tensors(frame_b: RGBDFrame, frame_a: RGBDFrame, intr: Intrinsics, rot_a: torch.Tensor,
                      trans_a: torch.Tensor, rot_b: torch.Tensor, trans_b: torch.Tensor,
                      depth_tolerance: float = DEPTH_TOLERANCE) -> tuple[torch.Tensor, np.ndarray]:
    """Differentiable counterpart of :func:`reproject_image` in the two poses.

    The frames' own poses must equal the given tensors (they decide which
    samples survive the z-test); the returned color is a function of the
    tensors through the bilinear splat weights. Returns ``(color (H, W, 3),
    validity (H, W))``.
    """
    h, w = intr.height, intr.width
    lay = _splat_layout(frame_b, frame_a, intr, depth_tolerance)
    dtype = rot_a.dtype
    color = torch.zeros(h * w, 3, dtype=dtype)
    if len(lay.src) == 0:
        return color.reshape(h, w, 3), lay.validity
    k = torch.as_tensor(intr.matrix, dtype=dtype)
    d = torch.as_tensor(frame_b.depth[lay.rows, lay.cols], dtype=dtype)
    q = torch.stack([torch.as_tensor(lay.cols + 0.5, dtype=dtype), torch.as_tensor(lay.rows + 0.5, dtype=dtype),
                     torch.ones(len(d), dtype=dtype)], 1)
    cam_b = (q @ torch.linalg.inv(k).T) * d[:, None]
    world = (cam_b - trans_b) @ rot_b          # R_b^T (x - t_b), row-vector form
    cam_a = world @ rot_a.T + trans_a
    proj = cam_a @ k.T
    gx = proj[:, 0] / proj[:, 2] - 0.5
    gy = proj[:, 1] / proj[:, 2] - 0.5
    fx = gx - torch.floor(gx).detach()
    fy = gy - torch.floor(gy).detach()
    cx = torch.as_tensor(np.array([c[0] for c in _CORNERS]), dtype=dtype)[lay.corner]
    cy = torch.as_tensor(np.array([c[1] for c in _CORNERS]), dtype=dtype)[lay.corner]
    sx, sy = fx[lay.src], fy[lay.src]
    wt = (cx * sx + (1 - cx) * (1 - sx)) * (cy * sy + (1 - cy) * (1 - sy))
    tgt = torch.as_tensor(lay.tgt)
    src_color = torch.as_tensor(frame_b.color[lay.rows, lay.cols], dtype=dtype)[lay.src]
    wsum = torch.zeros(h * w, dtype=dtype).index_add(0, tgt, wt)
    csum = color.index_add(0, tgt, src_color * wt[:, None])
    valid = torch.as_tensor(lay.validity.reshape(-1) > 0)
    color = torch.where(valid[:, None], csum / torch.where(valid, wsum, torch.ones_like(wsum))[:, None],
                        torch.zeros_like(csum))
    return color.reshape(h, w, 3), lay.validity
