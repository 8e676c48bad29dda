"""File formats: OBJ meshes, PNG images, PFM depth, JSON poses and intrinsics.

Directory layouts:

* model dir: ``mesh.obj``, ``texture.png``, ``poses.json``
* scan set dir: ``intrinsics.json``, ``poses.json``, ``frames/`` holding
  ``color_<id>.png``, ``depth_<id>.pfm`` and ``silhouette_<id>.png``
"""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Intrinsics, Pose, RGBDFrame, ScanSet, TexturedModel, Texture, TriMesh

POSE_CONVENTION = "world_to_camera"


def write_obj(path, mesh: TriMesh) -> None:
    lines = ["# triangle mesh with per-corner texture coordinates"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.reshape(-1, 2).tolist()]
    for fi, (a, b, c) in enumerate(mesh.faces):
        t = 3 * fi + 1
        lines.append(f"f {a + 1}/{t} {b + 1}/{t + 1} {c + 1}/{t + 2}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, tcs, faces, uvs = [], [], [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            tcs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            corners = []
            for token in parts[1:]:
                fields = token.split("/")
                vi = int(fields[0])
                ti = int(fields[1]) if len(fields) > 1 and fields[1] else None
                vi = vi - 1 if vi > 0 else len(verts) + vi
                if ti is not None:
                    ti = ti - 1 if ti > 0 else len(tcs) + ti
                corners.append((vi, ti))
            for k in range(1, len(corners) - 1):
                tri = [corners[0], corners[k], corners[k + 1]]
                faces.append([c[0] for c in tri])
                uvs.append([tcs[c[1]] if c[1] is not None else (0.0, 0.0) for c in tri])
    return TriMesh(np.array(verts), np.array(faces), np.array(uvs))


def write_png(path, img) -> None:
    a = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    """8-bit image as floats in [0, 1]; RGB images come back as (H, W, 3)."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def read_silhouette(path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return (np.asarray(img) >= 128).astype(np.float64)


def write_pfm(path, depth) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(d).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path} is not a PFM file")
        channels = 3 if header == b"PF" else 1
        dims = fh.readline().strip()
        while dims.startswith(b"#"):
            dims = fh.readline().strip()
        w, h = map(int, dims.split())
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * channels * 4), dtype=dtype)
    shape = (h, w, channels) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def poses_to_json(poses: dict) -> dict:
    return {
        "convention": POSE_CONVENTION,
        "poses": [
            {"id": int(k), "rotation": [float(x) for x in p.rotation.reshape(-1)],
             "translation": [float(x) for x in p.translation]}
            for k, p in sorted(poses.items())
        ],
    }


def poses_from_json(data) -> dict:
    if isinstance(data, dict):
        conv = data.get("convention", POSE_CONVENTION)
        if conv != POSE_CONVENTION:
            raise ValueError(f"unsupported pose convention {conv!r}")
        entries = data["poses"]
    else:
        entries = data
    return {int(e["id"]): Pose(np.array(e["rotation"], dtype=np.float64).reshape(3, 3), e["translation"])
            for e in entries}


def write_poses(path, poses: dict) -> None:
    Path(path).write_text(json.dumps(poses_to_json(poses), indent=1))


def read_poses(path) -> dict:
    return poses_from_json(json.loads(Path(path).read_text()))


def write_intrinsics(path, intr: Intrinsics) -> None:
    Path(path).write_text(json.dumps({
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "width": intr.width, "height": intr.height,
    }, indent=1))


def read_intrinsics(path) -> Intrinsics:
    d = json.loads(Path(path).read_text())
    return Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]),
                      int(d["height"]))


def write_model(directory, model: TexturedModel) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_obj(d / "mesh.obj", model.mesh)
    write_png(d / "texture.png", model.texture.texels)
    write_poses(d / "poses.json", model.poses)


def read_model(directory) -> TexturedModel:
    d = Path(directory)
    return TexturedModel(read_obj(d / "mesh.obj"), Texture(read_png(d / "texture.png")[..., :3]),
                         read_poses(d / "poses.json"))


def write_scanset(directory, scanset: ScanSet) -> None:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    write_intrinsics(d / "intrinsics.json", scanset.intrinsics)
    write_poses(d / "poses.json", {f.id: f.pose for f in scanset.frames})
    for f in scanset.frames:
        write_png(d / "frames" / f"color_{f.id:04d}.png", f.color)
        write_pfm(d / "frames" / f"depth_{f.id:04d}.pfm", f.depth)
        write_png(d / "frames" / f"silhouette_{f.id:04d}.png", f.silhouette)


_FRAME_RE = re.compile(r"color_(\d+)\.png$")


def read_scanset(directory) -> ScanSet:
    d = Path(directory)
    intr = read_intrinsics(d / "intrinsics.json")
    poses = read_poses(d / "poses.json")
    frames = []
    for fid in sorted(poses):
        color = read_png(d / "frames" / f"color_{fid:04d}.png")[..., :3]
        depth = read_pfm(d / "frames" / f"depth_{fid:04d}.pfm")
        sil = read_silhouette(d / "frames" / f"silhouette_{fid:04d}.png")
        frames.append(RGBDFrame(color, np.maximum(depth, 0.0), sil, poses[fid], fid))
    return ScanSet(frames, intr)


def frame_ids_in(directory) -> list[int]:
    return sorted(int(m.group(1)) for p in (Path(directory) / "frames").iterdir() if (m := _FRAME_RE.search(p.name)))
