"""Command-line entry point.

Exit codes: 0 success, 1 malformed arguments or config, 2 I/O failure,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .assets import make_shape
from .autodiff import NonFiniteGradientError, set_deterministic
from .config import ConfigError, load_config
from .estimator import JointRefiner, final_loss, format_trace
from .metrics import hausdorff_avg
from .optimizer import StageAbortedError, evaluate_model, parse_strategy
from .render import HARD, rasterize
from .reproject import reproject_image
from .schedule import NonFiniteLossError
from .synthetic import NoiseSpec, default_intrinsics, generate_benchmark, write_benchmark

log = logging.getLogger("rgbd_refine")

EXIT_ARGS, EXIT_IO, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rgbd-refine", description="Joint pose, geometry and texture refinement from RGB-D scans.")
    p.add_argument("--threads", type=int, default=1, help="cap on intra-op worker threads")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="render a synthetic benchmark with a corrupted initial model")
    g.add_argument("--shape", choices=("sphere", "cube"), default="sphere")
    g.add_argument("--texture", choices=("noise", "checker"), default="noise")
    g.add_argument("--noise-degree", type=float, default=1.5)
    g.add_argument("--views", type=int, default=40)
    g.add_argument("--resolution", type=int, default=128)
    g.add_argument("--texture-size", type=int, default=256)
    g.add_argument("--out", required=True)

    def add_inputs(sp):
        sp.add_argument("--scanset", required=True)
        sp.add_argument("--model", required=True)
        sp.add_argument("--config", default=None)
        sp.add_argument("--out", required=True)

    o = sub.add_parser("optimize", help="refine a model against a scan set")
    add_inputs(o)
    o.add_argument("--stages", type=_csv_list, default=None, help="subset of pose,geometry,texture")
    o.add_argument("--strategy", default="adaptive")
    o.add_argument("--max-steps", type=int, default=None)

    r = sub.add_parser("render", help="render a model from one of its poses")
    r.add_argument("--model", required=True)
    r.add_argument("--pose-id", type=int, required=True)
    r.add_argument("--intrinsics", default=None, help="intrinsics.json (default: square 128 px camera)")
    r.add_argument("--out", required=True, help="output prefix")

    e = sub.add_parser("evaluate", help="PSNR/SSIM per view, Hausdorff against a ground-truth model")
    e.add_argument("--scanset", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--gt-model", default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--dump-reprojection", default=None, metavar="DIR",
                   help="write each view's nearest-neighbor warp and validity as PNG")

    a = sub.add_parser("ablate-strategy", help="compare scheduling strategies from the same start")
    add_inputs(a)
    a.add_argument("--strategies", type=_csv_list, default=["adaptive", "hybrid", "fixed:40", "fixed:200"])
    a.add_argument("--budget", type=int, default=None,
                   help="step budget for every strategy (default: the adaptive run's length)")
    return p


def _refiner(args, **overrides) -> JointRefiner:
    params = load_config(args.config) if args.config else {}
    if args.seed is not None:
        params["seed"] = args.seed
    params.update(overrides)
    return JointRefiner(**params)


def cmd_gen_synthetic(args) -> None:
    if args.views < 2:
        raise UsageError("--views must be at least 2")
    mesh, tex = make_shape(args.shape, args.texture, args.texture_size, seed=args.seed or 0)
    bench = generate_benchmark(mesh, tex, NoiseSpec(args.noise_degree, seed=args.seed or 0),
                               view_count=args.views, resolution=args.resolution)
    write_benchmark(args.out, bench)
    log.info("wrote %d views to %s", len(bench.scanset.frames), args.out)


def cmd_optimize(args) -> None:
    scanset, model = io.read_scanset(args.scanset), io.read_model(args.model)
    over = {"strategy": args.strategy, "max_steps": args.max_steps}
    if args.stages:
        over["stages"] = tuple(args.stages)
    est = _refiner(args, **over).fit(scanset, model)
    out = Path(args.out)
    io.write_model(out, est.model_)
    (out / "trace.csv").write_text(est.trace_csv())
    log.info("%d steps, final batch L_common %.6f", est.n_steps_, final_loss(est.trace_))


def cmd_render(args) -> None:
    model = io.read_model(args.model)
    intr = io.read_intrinsics(args.intrinsics) if args.intrinsics else default_intrinsics()
    if args.pose_id not in model.poses:
        raise UsageError(f"model has no pose with id {args.pose_id}")
    out = rasterize(model.mesh, model.texture, model.poses[args.pose_id], intr, HARD).numpy()
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    io.write_png(f"{prefix}_color.png", out["color"])
    io.write_pfm(f"{prefix}_depth.pfm", out["depth"])
    io.write_png(f"{prefix}_silhouette.png", out["silhouette"])


def cmd_evaluate(args) -> None:
    scanset, model = io.read_scanset(args.scanset), io.read_model(args.model)
    metrics = evaluate_model(model, scanset)
    if args.gt_model:
        metrics["hausdorff"] = hausdorff_avg(model.mesh, io.read_model(args.gt_model).mesh)
    Path(args.out).write_text(json.dumps(metrics, indent=1))
    if args.dump_reprojection:
        from dataclasses import replace
        from .optimizer import nearest_neighbor

        d = Path(args.dump_reprojection)
        d.mkdir(parents=True, exist_ok=True)
        for f in scanset.frames:
            aux = nearest_neighbor(f.id, model.poses)
            rp = reproject_image(replace(scanset.frame(aux), pose=model.poses[aux]),
                                 replace(f, pose=model.poses[f.id]), scanset.intrinsics)
            io.write_png(d / f"reproj_{f.id:04d}_from_{aux:04d}.png", rp.color * rp.validity[..., None])
            io.write_png(d / f"validity_{f.id:04d}.png", rp.validity)
    log.info("mean PSNR %.3f dB, mean SSIM %.4f", metrics["mean_psnr"], metrics["mean_ssim"])


def cmd_ablate(args) -> None:
    for s in args.strategies:
        parse_strategy(s)
    scanset, model = io.read_scanset(args.scanset), io.read_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    budget = args.budget
    order = sorted(args.strategies, key=lambda s: parse_strategy(s)[0] != "adaptive")
    summary = {}
    for s in order:
        if parse_strategy(s)[0] == "hybrid" and budget is None:
            raise UsageError("hybrid needs --budget unless adaptive runs first")
        est = _refiner(args, strategy=s, max_steps=budget, common_only=True).fit(scanset, model)
        if budget is None and s == "adaptive":
            budget = est.n_steps_
        name = s.replace(":", "")
        (out / f"trace_{name}.csv").write_text(format_trace(est.trace_))
        summary[s] = {"steps": est.n_steps_, "final_batch_L_common": final_loss(est.trace_),
                      "final_L_common": est.final_common_loss(), "mean_psnr": est.score(scanset)}
        log.info("%s: %d steps, L_common %.6f", s, est.n_steps_, summary[s]["final_L_common"])
    (out / "summary.json").write_text(json.dumps(summary, indent=1))


COMMANDS = {"gen-synthetic": cmd_gen_synthetic, "optimize": cmd_optimize, "render": cmd_render,
            "evaluate": cmd_evaluate, "ablate-strategy": cmd_ablate}


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"rgbd-refine: {exc}", file=sys.stderr)
        return EXIT_ARGS
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    set_deterministic(True, threads=args.threads)
    np.seterr(all="ignore")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_ARGS
    except (NonFiniteGradientError, NonFiniteLossError, StageAbortedError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_ARGS
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
