"""Joint pose / geometry / texture refinement through the soft renderer.

:class:`RefinementProblem` owns the optimizable state (pose increments,
vertices, texels, discriminator) for one scan set. The module-level
functions drive it: :func:`run_stage` runs one internal loop,
:func:`joint_optimize` the external pose -> geometry -> texture cycles,
and :func:`run_strategy` the alternative schedules used for ablations.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .autodiff import (DTYPE, AdamState, NonFiniteGradientError, ParamGroup, adam_step, axis_angle_exp,
                       gradients)
from .losses import (LossWeights, PatchDiscriminator, adversarial_losses, common_loss, depth_loss, iou_loss,
                     laplacian_loss, laplacian_tensor, rgb_loss)
from .metrics import psnr, ssim
from .render import HARD, SoftParams, render_tensors
from .reproject import NoNeighborsError, ReprojectedImage, neighbor_views, reproject_image, reproject_tensors
from .schedule import KEEP, NEXT, AdaptiveState, controller_step, record_failed_step
from .scene import Pose, ScanSet, TexturedModel, Texture, TriMesh, orthonormalize, rotation_angle, uniform_laplacian

log = logging.getLogger(__name__)

STAGES = ("pose", "geometry", "texture")
STAGE_GROUP = {"pose": "pose_delta", "geometry": "vertices", "texture": "texels"}
TRACE_COLUMNS = ("step", "cycle", "stage", "L_rgb", "L_depth", "L_iou", "L_common", "L_lap", "d_loss", "g_loss",
                 "decision")


class StageAbortedError(RuntimeError):
    """Every target view lacked an auxiliary neighbor."""


@dataclass
class OptimConfig:
    """Numerical settings shared by every stage."""

    weights: LossWeights = field(default_factory=LossWeights)
    delta: float = 1e-3
    patience: int = 50
    t_max: int = 1000
    external_cycles: int = 3
    batch_size: int = 4
    seed: int = 0
    rgb_only: bool = False
    lr_pose: float = 1e-3
    lr_vertices: float | None = None
    lr_texture: float = 1e-2
    lr_discriminator: float = 1e-4
    sigma: float = 1e-4
    gamma: float = 1e-4
    depth_tolerance: float = 0.01
    max_neighbor_angle: float = 15.0

    @property
    def soft(self) -> SoftParams:
        return SoftParams(sigma=self.sigma, gamma=self.gamma)


@dataclass
class StageConfig:
    stage: str
    extra_losses: bool = True
    steps: int | None = None  # fixed step count instead of the adaptive controller

    def __post_init__(self):
        if self.stage not in STAGES + ("hybrid",):
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def trainable(self) -> tuple[str, ...]:
        return tuple(STAGE_GROUP.values()) if self.stage == "hybrid" else (STAGE_GROUP[self.stage],)


@dataclass
class Schedule:
    external_cycles: int = 3
    stages: tuple = STAGES

    def __post_init__(self):
        if self.external_cycles < 1:
            raise ValueError("external_cycles must be at least 1")
        for s in self.stages:
            if s not in STAGES:
                raise ValueError(f"unknown stage {s!r}")


class RefinementProblem:
    """Optimizable state for one scan set and starting model."""

    def __init__(self, scanset: ScanSet, model: TexturedModel, config: OptimConfig | None = None):
        self.scanset = scanset
        self.config = config or OptimConfig()
        self.intr = scanset.intrinsics
        self.ids = scanset.ids
        missing = [i for i in self.ids if i not in model.poses]
        if missing:
            raise ValueError(f"model lacks poses for frames {missing}")
        cfg = self.config
        self.faces = torch.as_tensor(model.mesh.faces, dtype=torch.long)
        self.uvs = torch.as_tensor(model.mesh.uvs, dtype=DTYPE)
        self.laplacian = laplacian_tensor(uniform_laplacian(model.mesh))
        lr_v = cfg.lr_vertices if cfg.lr_vertices is not None else 1e-3 * model.mesh.bbox_diagonal()
        self.groups = {
            "vertices": ParamGroup("vertices", torch.as_tensor(model.mesh.vertices), lr_v),
            "texels": ParamGroup("texels", torch.as_tensor(model.texture.texels), cfg.lr_texture),
            "pose_delta": ParamGroup("pose_delta", torch.zeros(len(self.ids), 6), cfg.lr_pose),
        }
        self.base_rot = torch.stack([torch.as_tensor(model.poses[i].rotation, dtype=DTYPE) for i in self.ids])
        self.base_trans = torch.stack([torch.as_tensor(model.poses[i].translation, dtype=DTYPE) for i in self.ids])
        self.discriminator = PatchDiscriminator(seed=cfg.seed, learning_rate=cfg.lr_discriminator)
        self.disc_state = AdamState.for_group(self.discriminator.params, beta1=0.5)
        self.rng = np.random.default_rng(cfg.seed)
        self.frames = [
            (torch.as_tensor(f.color, dtype=DTYPE), torch.as_tensor(f.depth, dtype=DTYPE),
             torch.as_tensor(f.silhouette, dtype=DTYPE))
            for f in scanset.frames
        ]
        self.step = 0
        self._reproj_cache: dict = {}

    # -- parameters ---------------------------------------------------------
    def set_trainable(self, kinds) -> None:
        for kind, g in self.groups.items():
            if kind in kinds:
                g.unfreeze()
            else:
                g.freeze()
        self.discriminator.params.freeze()

    def pose_tensors(self, idx: int) -> tuple[torch.Tensor, torch.Tensor]:
        d = self.groups["pose_delta"].values[idx]
        return axis_angle_exp(d[:3]) @ self.base_rot[idx], self.base_trans[idx] + d[3:]

    def current_poses(self) -> dict:
        out = {}
        with torch.no_grad():
            for k, fid in enumerate(self.ids):
                if not self.groups["pose_delta"].values[k].any():
                    # untouched view: hand back the stored pose bit for bit
                    out[fid] = Pose(self.base_rot[k].numpy().copy(), self.base_trans[k].numpy().copy())
                    continue
                r, t = self.pose_tensors(k)
                out[fid] = Pose(orthonormalize(r.numpy()), t.numpy().copy())
        return out

    def fold_pose_deltas(self) -> None:
        """Move the accumulated increments into the base poses and zero them."""
        poses = self.current_poses()
        self.base_rot = torch.stack([torch.as_tensor(poses[i].rotation, dtype=DTYPE) for i in self.ids])
        self.base_trans = torch.stack([torch.as_tensor(poses[i].translation, dtype=DTYPE) for i in self.ids])
        with torch.no_grad():
            self.groups["pose_delta"].values.zero_()

    def model(self) -> TexturedModel:
        mesh = TriMesh(self.groups["vertices"].numpy(), self.faces.numpy(), self.uvs.numpy())
        tex = Texture(np.clip(self.groups["texels"].numpy(), 0.0, 1.0))
        return TexturedModel(mesh, tex, self.current_poses())

    def clamp_texels(self) -> None:
        with torch.no_grad():
            self.groups["texels"].values.clamp_(0.0, 1.0)

    # -- per-view terms -----------------------------------------------------
    def render(self, idx: int, soft: SoftParams | None = None):
        r, t = self.pose_tensors(idx)
        return render_tensors(self.groups["vertices"].values, self.faces, self.uvs, self.groups["texels"].values,
                              r, t, self.intr, soft or self.config.soft)

    def neighbors(self) -> dict:
        poses = self.current_poses()
        out = {}
        for fid in self.ids:
            try:
                out[fid] = neighbor_views(fid, self.scanset, self.config.max_neighbor_angle, poses)
            except NoNeighborsError:
                out[fid] = []
        return out

    def reprojection(self, target: int, aux: int, poses: dict) -> ReprojectedImage:
        key = (target, aux, poses[target].matrix().tobytes(), poses[aux].matrix().tobytes())
        hit = self._reproj_cache.get(key)
        if hit is None:
            fa = replace(self.scanset.frame(target), pose=poses[target])
            fb = replace(self.scanset.frame(aux), pose=poses[aux])
            hit = reproject_image(fb, fa, self.intr, self.config.depth_tolerance)
            if len(self._reproj_cache) > 4 * len(self.ids) * len(self.ids):
                self._reproj_cache.clear()
            self._reproj_cache[key] = hit
        return hit

    def view_terms(self, target: int, aux: int, poses: dict, soft: SoftParams | None = None) -> dict:
        idx = self.ids.index(target)
        color, depth, sil = self.frames[idx]
        out = self.render(idx, soft)
        if self.groups["pose_delta"].values.requires_grad:
            # poses are live: warp differentiably so the auxiliary pose gets a gradient too
            fa = replace(self.scanset.frame(target), pose=poses[target])
            fb = replace(self.scanset.frame(aux), pose=poses[aux])
            ra, ta = self.pose_tensors(idx)
            rb, tb = self.pose_tensors(self.ids.index(aux))
            reproj, validity = reproject_tensors(fb, fa, self.intr, ra, ta, rb, tb, self.config.depth_tolerance)
            valid = torch.as_tensor(validity, dtype=DTYPE)
        else:
            rp = self.reprojection(target, aux, poses)
            valid = torch.as_tensor(rp.validity, dtype=DTYPE)
            reproj = torch.as_tensor(rp.color, dtype=DTYPE)
        l_rgb = rgb_loss(reproj, valid, out.color)
        l_depth = depth_loss(depth, out.depth, out.silhouette)
        l_iou = iou_loss(sil, out.silhouette)
        l_common = common_loss(l_rgb, l_depth, l_iou, self.config.weights, self.config.rgb_only)
        return {"render": out, "reproj": reproj, "valid": valid, "scan_color": color, "L_rgb": l_rgb,
                "L_depth": l_depth, "L_iou": l_iou, "L_common": l_common}

    def draw_batch(self, neighbors: dict) -> list[tuple[int, int]]:
        pool = [fid for fid in self.ids if neighbors[fid]]
        if not pool:
            raise StageAbortedError("no target view has an auxiliary neighbor")
        k = min(self.config.batch_size, len(pool))
        targets = self.rng.choice(pool, size=k, replace=False)
        return [(int(t), int(self.rng.choice(neighbors[int(t)]))) for t in targets]


def _mean(values):
    return sum(values) / len(values)


def _value(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def _apply(problem: RefinementProblem, kinds, loss, states: dict) -> bool:
    groups = [problem.groups[k] for k in kinds]
    grads = gradients(loss, groups, allow_unrecorded=True)
    try:
        for g, gr in zip(groups, grads):
            if not torch.isfinite(gr).all():
                raise NonFiniteGradientError(g.kind)
        for g, gr in zip(groups, grads):
            adam_step(g, gr, states[g.kind])
    except NonFiniteGradientError as exc:
        log.warning("step %d: non-finite gradient in %s, update discarded", problem.step, exc)
        return False
    if "texels" in kinds:
        problem.clamp_texels()
    return True


def optimization_step(problem: RefinementProblem, stage: StageConfig, states: dict, neighbors: dict) -> dict:
    """Render a batch, build the stage loss and apply one Adam update.

    Returns the trace row (without ``decision``).
    """
    cfg = problem.config
    kinds = stage.trainable
    problem.set_trainable(kinds)
    batch = problem.draw_batch(neighbors)
    poses = problem.current_poses()
    terms = [problem.view_terms(t, a, poses) for t, a in batch]
    l_common = _mean([x["L_common"] for x in terms])
    row = {
        "stage": stage.stage,
        "L_rgb": _value(_mean([x["L_rgb"] for x in terms])),
        "L_depth": _value(_mean([x["L_depth"] for x in terms])),
        "L_iou": _value(_mean([x["L_iou"] for x in terms])),
        "L_common": _value(l_common),
    }
    loss = l_common
    if stage.stage == "geometry" and stage.extra_losses:
        l_lap = laplacian_loss(problem.laplacian, problem.groups["vertices"].values)
        loss = loss + cfg.weights.lambda_lap * l_lap
        row["L_lap"] = _value(l_lap)
    if stage.stage == "texture" and stage.extra_losses:
        cond = torch.stack([x["scan_color"] for x in terms])
        mask = torch.stack([x["valid"] for x in terms]).unsqueeze(-1)
        real = torch.stack([x["reproj"] for x in terms]) * mask
        fake = torch.stack([x["render"].color for x in terms]) * mask
        disc = problem.discriminator
        disc.params.unfreeze()
        d_loss, _ = adversarial_losses(disc, cond, real, fake.detach())
        (g_d,) = gradients(d_loss, [disc.params])
        try:
            adam_step(disc.params, g_d, problem.disc_state)
        except NonFiniteGradientError:
            log.warning("step %d: non-finite discriminator gradient, update discarded", problem.step)
        disc.params.freeze()
        _, g_loss = adversarial_losses(disc, cond, real, fake)
        loss = loss + cfg.weights.lambda_adv * g_loss
        row["d_loss"] = _value(d_loss)
        row["g_loss"] = _value(g_loss)
    if not math.isfinite(_value(loss)):
        log.warning("step %d: non-finite loss, update discarded", problem.step)
        row["L_common"] = float("nan")
        return row
    _apply(problem, kinds, loss, states)
    return row


def _fresh_states(problem: RefinementProblem, kinds) -> dict:
    return {k: AdamState.for_group(problem.groups[k]) for k in kinds}


def run_stage(problem: RefinementProblem, stage: StageConfig, cycle: int = 0, max_steps: int | None = None) -> list[dict]:
    """Internal loop for one stage; returns one trace row per step.

    Stops when the adaptive controller says ``next``, after ``stage.steps``
    steps when a fixed count is configured, or when ``max_steps`` (a global
    budget) is exhausted.
    """
    cfg = problem.config
    states = _fresh_states(problem, stage.trainable)
    neighbors = problem.neighbors()
    ctrl = AdaptiveState(cfg.delta, cfg.patience, cfg.t_max)
    rows = []
    while True:
        row = optimization_step(problem, stage, states, neighbors)
        loss = row["L_common"]
        if stage.steps is not None:
            done = len(rows) + 1 >= stage.steps
            decision = NEXT if done else KEEP
        elif math.isfinite(loss):
            decision = controller_step(ctrl, loss)
        else:
            decision = record_failed_step(ctrl)
        if max_steps is not None and len(rows) + 1 >= max_steps:
            decision = NEXT
        problem.step += 1
        row.update(step=problem.step, cycle=cycle, decision=decision)
        rows.append(row)
        if decision == NEXT:
            break
    if "pose_delta" in stage.trainable:
        problem.fold_pose_deltas()
    log.info("cycle %d %s stage: %d steps, L_common %.5f", cycle, stage.stage, len(rows), rows[-1]["L_common"])
    return rows


def joint_optimize(problem: RefinementProblem, schedule: Schedule | None = None, extra_losses: bool = True,
                   fixed_steps: int | None = None, budget: int | None = None) -> list[dict]:
    """External cycles over the scheduled stages (pose, geometry, texture by default)."""
    schedule = schedule or Schedule(problem.config.external_cycles)
    trace: list[dict] = []
    for cycle in range(1, schedule.external_cycles + 1):
        for name in schedule.stages:
            remaining = None if budget is None else budget - len(trace)
            if remaining is not None and remaining <= 0:
                return trace
            trace += run_stage(problem, StageConfig(name, extra_losses, fixed_steps), cycle, remaining)
    return trace


def run_hybrid(problem: RefinementProblem, steps: int) -> list[dict]:
    """All three groups updated together every step, common loss only."""
    stage = StageConfig("hybrid", extra_losses=False)
    states = _fresh_states(problem, stage.trainable)
    neighbors = problem.neighbors()
    rows = []
    for k in range(steps):
        row = optimization_step(problem, stage, states, neighbors)
        problem.step += 1
        row.update(step=problem.step, cycle=1, decision=NEXT if k == steps - 1 else KEEP)
        rows.append(row)
    problem.fold_pose_deltas()
    return rows


def parse_strategy(kind: str) -> tuple[str, int | None]:
    kind = kind.strip().lower()
    if kind in ("adaptive", "hybrid"):
        return kind, None
    if kind.startswith("fixed"):
        _, _, k = kind.partition(":")
        k = k or kind[5:].strip("()")
        if not k.isdigit() or int(k) < 1:
            raise ValueError(f"fixed strategy needs a positive step count, got {kind!r}")
        return "fixed", int(k)
    raise ValueError(f"unknown strategy {kind!r}")


def run_strategy(kind: str, scanset: ScanSet, model: TexturedModel, config: OptimConfig | None = None,
                 budget: int | None = None, common_only: bool = True) -> tuple[RefinementProblem, list[dict]]:
    """Run one optimization strategy on a private copy of ``model``.

    ``kind`` is ``adaptive``, ``hybrid`` or ``fixed:<k>``. With
    ``common_only`` (the default) interleaved strategies skip the Laplacian
    and adversarial terms so that every strategy minimizes the same loss.
    """
    name, k = parse_strategy(kind)
    problem = RefinementProblem(scanset, model.copy(), config)
    if name == "hybrid":
        if budget is None:
            raise ValueError("the hybrid strategy needs a step budget")
        return problem, run_hybrid(problem, budget)
    trace = joint_optimize(problem, extra_losses=not common_only, fixed_steps=k, budget=budget)
    return problem, trace


# -- evaluation ---------------------------------------------------------------

def nearest_neighbor(fid: int, poses: dict) -> int:
    others = [o for o in poses if o != fid]
    return min(others, key=lambda o: (rotation_angle(poses[fid].rotation, poses[o].rotation), o))


def evaluate_common_loss(problem: RefinementProblem) -> float:
    """L_common averaged over every view, each paired with its nearest view."""
    problem.set_trainable(())
    poses = problem.current_poses()
    with torch.no_grad():
        vals = [float(problem.view_terms(fid, nearest_neighbor(fid, poses), poses)["L_common"]) for fid in problem.ids]
    return _mean(vals)


def evaluate_model(model: TexturedModel, scanset: ScanSet, soft: SoftParams = HARD) -> dict:
    """Per-view PSNR/SSIM of the model rendered under its own poses against the scans."""
    from .render import rasterize

    per_view = []
    for f in scanset.frames:
        out = rasterize(model.mesh, model.texture, model.poses[f.id], scanset.intrinsics, soft).numpy()
        img = np.clip(out["color"], 0, 1)
        per_view.append({"id": f.id, "psnr": psnr(img, f.color), "ssim": ssim(img, f.color)})
    return {
        "per_view": per_view,
        "mean_psnr": float(np.mean([v["psnr"] for v in per_view])),
        "mean_ssim": float(np.mean([v["ssim"] for v in per_view])),
    }
