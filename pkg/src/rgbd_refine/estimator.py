"""Estimator-style front end to the joint refinement."""
from __future__ import annotations

import csv
import io as _io
import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import set_deterministic
from .losses import LossWeights
from .metrics import hausdorff_avg
from .optimizer import (STAGES, TRACE_COLUMNS, OptimConfig, RefinementProblem, Schedule, evaluate_common_loss,
                        evaluate_model, joint_optimize, parse_strategy, run_hybrid)
from .render import HARD, rasterize
from .scene import ScanSet, TexturedModel, validate_mesh, validate_texture


def check_scanset(scanset) -> ScanSet:
    if not isinstance(scanset, ScanSet):
        raise TypeError(f"expected a ScanSet, got {type(scanset).__name__}")
    return scanset


def check_model(model, scanset: ScanSet | None = None) -> TexturedModel:
    """Reject malformed meshes/textures and models missing poses for scanned frames."""
    if not isinstance(model, TexturedModel):
        raise TypeError(f"expected a TexturedModel, got {type(model).__name__}")
    problems = validate_mesh(model.mesh) + validate_texture(model.texture)
    if problems:
        raise ValueError("invalid model: " + "; ".join(problems))
    if scanset is not None:
        missing = [i for i in scanset.ids if i not in model.poses]
        if missing:
            raise ValueError(f"model lacks poses for frames {missing}")
    return model


def format_trace(rows: list[dict]) -> str:
    """CSV text for a trace; absent loss terms are left empty."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in rows:
        out = []
        for c in TRACE_COLUMNS:
            v = r.get(c, "")
            out.append(repr(v) if isinstance(v, float) else v)
        w.writerow(out)
    return buf.getvalue()


class JointRefiner(BaseEstimator):
    """Jointly refine camera poses, mesh vertices and texture against RGB-D scans.

    ``fit(scanset, model)`` runs the optimization on a copy of ``model``;
    the result is ``model_`` and the per-step log is ``trace_``.

    ``strategy`` selects the stage schedule: ``adaptive`` (patience-based
    switching), ``fixed:<k>`` (k steps per stage) or ``hybrid`` (all groups
    every step, needs ``max_steps``). ``stages`` restricts which stages run,
    e.g. ``("geometry", "texture")`` to leave poses untouched.
    """

    def __init__(self, lambda_c=0.1, lambda_d=1.0, lambda_s=1.0, lambda_lap=0.5, lambda_adv=0.1, delta=1e-3,
                 patience=50, t_max=1000, external_cycles=3, batch_size=4, seed=0, rgb_only=False, lr_pose=1e-3,
                 lr_vertices=None, lr_texture=1e-2, lr_discriminator=1e-4, sigma=1e-4, gamma=1e-4,
                 depth_tolerance=0.01, max_neighbor_angle=15.0, strategy="adaptive", stages=STAGES,
                 common_only=False, max_steps=None, deterministic=True):
        self.lambda_c = lambda_c
        self.lambda_d = lambda_d
        self.lambda_s = lambda_s
        self.lambda_lap = lambda_lap
        self.lambda_adv = lambda_adv
        self.delta = delta
        self.patience = patience
        self.t_max = t_max
        self.external_cycles = external_cycles
        self.batch_size = batch_size
        self.seed = seed
        self.rgb_only = rgb_only
        self.lr_pose = lr_pose
        self.lr_vertices = lr_vertices
        self.lr_texture = lr_texture
        self.lr_discriminator = lr_discriminator
        self.sigma = sigma
        self.gamma = gamma
        self.depth_tolerance = depth_tolerance
        self.max_neighbor_angle = max_neighbor_angle
        self.strategy = strategy
        self.stages = stages
        self.common_only = common_only
        self.max_steps = max_steps
        self.deterministic = deterministic

    def _config(self) -> OptimConfig:
        return OptimConfig(
            weights=LossWeights(self.lambda_c, self.lambda_d, self.lambda_s, self.lambda_lap, self.lambda_adv),
            delta=float(self.delta), patience=int(self.patience), t_max=int(self.t_max),
            external_cycles=int(self.external_cycles), batch_size=int(self.batch_size), seed=int(self.seed),
            rgb_only=bool(self.rgb_only), lr_pose=float(self.lr_pose),
            lr_vertices=None if self.lr_vertices is None else float(self.lr_vertices),
            lr_texture=float(self.lr_texture), lr_discriminator=float(self.lr_discriminator),
            sigma=float(self.sigma), gamma=float(self.gamma), depth_tolerance=float(self.depth_tolerance),
            max_neighbor_angle=float(self.max_neighbor_angle),
        )

    def fit(self, scanset: ScanSet, model: TexturedModel):
        check_scanset(scanset)
        check_model(model, scanset)
        if self.deterministic:
            set_deterministic(True)
        name, k = parse_strategy(self.strategy)
        problem = RefinementProblem(scanset, model.copy(), self._config())
        if name == "hybrid":
            if self.max_steps is None:
                raise ValueError("the hybrid strategy needs max_steps")
            trace = run_hybrid(problem, int(self.max_steps))
        else:
            schedule = Schedule(int(self.external_cycles), tuple(self.stages))
            trace = joint_optimize(problem, schedule, extra_losses=not self.common_only, fixed_steps=k,
                                   budget=self.max_steps)
        self.problem_ = problem
        self.model_ = problem.model()
        self.trace_ = trace
        self.n_steps_ = len(trace)
        return self

    def final_common_loss(self) -> float:
        """Full-pass L_common of the fitted model (every view, nearest auxiliary)."""
        check_is_fitted(self, "problem_")
        return evaluate_common_loss(self.problem_)

    def predict(self, frame_ids=None, intrinsics=None) -> dict:
        """Render the refined model (near-hard settings) for the given frame ids.

        Returns ``{id: {"color", "depth", "silhouette"}}``.
        """
        check_is_fitted(self, "model_")
        intr = intrinsics if intrinsics is not None else self.problem_.intr
        ids = self.model_.poses.keys() if frame_ids is None else frame_ids
        return {i: rasterize(self.model_.mesh, self.model_.texture, self.model_.poses[i], intr, HARD).numpy()
                for i in ids}

    def evaluate(self, scanset: ScanSet, gt_model: TexturedModel | None = None) -> dict:
        check_is_fitted(self, "model_")
        out = evaluate_model(self.model_, check_scanset(scanset))
        if gt_model is not None:
            out["hausdorff"] = hausdorff_avg(self.model_.mesh, gt_model.mesh)
        return out

    def score(self, scanset: ScanSet, model=None) -> float:
        """Mean PSNR of the refined model against ``scanset`` (higher is better)."""
        return self.evaluate(scanset)["mean_psnr"]

    def trace_csv(self) -> str:
        check_is_fitted(self, "trace_")
        return format_trace(self.trace_)


def final_loss(trace: list[dict]) -> float:
    """Last finite batch-averaged L_common in a trace."""
    for row in reversed(trace):
        if math.isfinite(row["L_common"]):
            return row["L_common"]
    return float("nan")


def mean_rotation_error(model: TexturedModel, reference: TexturedModel) -> float:
    from .scene import rotation_angle

    return float(np.mean([rotation_angle(model.poses[i].rotation, reference.poses[i].rotation)
                          for i in reference.poses]))
