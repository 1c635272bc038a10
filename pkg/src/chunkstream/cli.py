"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 malformed input file, 4 numeric domain
error (e.g. MAWE of a static video).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .ablation import fitted_refiner, run_blending_ablation
from .diffusion import GuidanceWeights, make_schedule
from .metrics import FlowParams, MetricReport, StaticVideoError, flow_std_smoothness, ofs, reid_score, \
    scuts, video_flows, warp_error
from .refine import MODES, refine_video, split_into_chunks
from .rng import RngStream
from .streaming import GenerationPlan, build_pipeline, generate_video
from .videoldm import UNetConfig

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_METRICS = ("mawe", "ofs", "warp_error", "scuts", "flow_std")


class UsageError(Exception):
    pass


def _schedule(cfg: io.RunConfig):
    return make_schedule(cfg.T, cfg.beta0, cfg.betaT)


def cmd_generate(args, cfg: io.RunConfig) -> int:
    if args.frames < cfg.F or args.frames % cfg.F:
        raise UsageError(f"--frames must be a positive multiple of {cfg.F}, got {args.frames}")
    seed = cfg.seed if args.seed is None else args.seed
    plan = GenerationPlan(args.frames, args.prompt, seed, cfg.F, cfg.F_cond, cfg.ddim_steps, cfg.eta,
                          GuidanceWeights(cfg.omega_text, cfg.omega_anchor))
    pipe = build_pipeline(UNetConfig(F=cfg.F), schedule=_schedule(cfg))
    if args.weights:
        weights = io.read_weights(args.weights)
        missing = set(pipe.unet.weights) - set(weights)
        if missing:
            raise io.FormatError(f"weight directory lacks {sorted(missing)[:3]}...")
        pipe.unet = replace(pipe.unet, weights=weights)
    t0 = time.perf_counter()
    video = generate_video(plan, pipe)
    io.write_tensor(args.out, video)
    print(f"chunks: {plan.n_chunks}  frames: {args.frames}  time: {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_enhance(args, cfg: io.RunConfig) -> int:
    video = io.read_tensor(args.input)
    if video.ndim == 3:
        video = video[..., None]
    if video.ndim != 4:
        raise io.FormatError(f"expected a (frames, h, w[, c]) tensor, got shape {video.shape}")
    if len(video) < cfg.F_enh:
        raise UsageError(f"input has {len(video)} frames; enhancement needs at least F_enh={cfg.F_enh}")
    tprime = cfg.Tprime if args.tprime is None else args.tprime
    if not 1 <= tprime < cfg.T:
        raise UsageError(f"--tprime must be in [1, {cfg.T - 1}]")
    steps = cfg.ddim_steps if args.steps is None else args.steps
    seed = cfg.seed if args.seed is None else args.seed
    s = _schedule(cfg)
    plan = split_into_chunks(len(video), cfg.F_enh, cfg.O)
    t0 = time.perf_counter()
    out = refine_video(video, args.mode, tprime, fitted_refiner(video, s), s, steps, RngStream(seed),
                       cfg.F_enh, cfg.O, cfg.eta)
    io.write_tensor(args.out, out)
    print(f"chunks: {len(plan.starts)}  mode: {args.mode}  time: {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def _load_embeddings(path) -> list[np.ndarray]:
    try:
        frames = json.loads(Path(path).read_text())
        return [np.asarray(f, dtype=np.float64).reshape(len(f), -1) if len(f) else np.zeros((0, 0))
                for f in frames]
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise io.FormatError(f"embeddings file: {exc}") from None


def cmd_eval(args, cfg: io.RunConfig) -> int:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in wanted if m not in MetricReport.__dataclass_fields__]
    if unknown:
        raise UsageError(f"unknown metrics {unknown}")
    if "reid" in wanted and not args.embeddings:
        raise UsageError("metric 'reid' needs --embeddings")
    video = io.read_tensor(args.input)
    params = FlowParams(cfg.flow_iters, cfg.flow_lambda, cfg.flow_levels)
    flows = video_flows(video, params) if {"mawe", "ofs", "warp_error", "flow_std"} & set(wanted) else None
    report = MetricReport()
    error = None
    for name in MetricReport.__dataclass_fields__:
        if name not in wanted:
            continue
        if name == "mawe":
            motion = ofs(video, params, flows)
            if motion <= 1e-6:
                error = StaticVideoError("undefined: static video")
                continue
            report.mawe = warp_error(video, cfg.occlusion_thresh, params, flows) / motion
        elif name == "ofs":
            report.ofs = ofs(video, params, flows)
        elif name == "warp_error":
            report.warp_error = warp_error(video, cfg.occlusion_thresh, params, flows)
        elif name == "scuts":
            report.scuts = scuts(video, cfg.scuts_window, cfg.scuts_ratio, cfg.scuts_min_content)
        elif name == "flow_std":
            report.flow_std = flow_std_smoothness(video, params, flows)
        elif name == "reid":
            report.reid = reid_score(_load_embeddings(args.embeddings))
    Path(args.out).write_text(io.metrics_csv(report.rows()))
    if error is not None:
        raise error
    return EXIT_OK


def cmd_xtslice(args, cfg: io.RunConfig) -> int:
    video = io.read_tensor(args.input)
    if video.ndim not in (3, 4):
        raise io.FormatError(f"expected a video tensor, got shape {video.shape}")
    if not 0 <= args.row < video.shape[1]:
        raise UsageError(f"--row must be in [0, {video.shape[1] - 1}]")
    Path(args.out).write_bytes(io.encode_pgm(io.xt_slice(video, args.row)))
    return EXIT_OK


def cmd_ablate(args, cfg: io.RunConfig) -> int:
    if args.frames < 40:
        raise UsageError("--frames must be at least 40")
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    tprime = cfg.Tprime if args.tprime is None else args.tprime
    results = run_blending_ablation(args.frames, args.seeds, tprime, cfg.ddim_steps, cfg.F_enh, cfg.O,
                                    _schedule(cfg), FlowParams(cfg.flow_iters, cfg.flow_lambda, cfg.flow_levels))
    rows = [(m, (float(np.mean(v)), float(np.std(v)))) for m, v in results.items()]
    Path(args.out).write_text(io.metrics_csv(rows, header=("mode", "flow_std_mean", "flow_std_sd")))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkstream", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help=f"run config file (default: ${io.CONFIG_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a long latent video chunk by chunk")
    g.add_argument("--prompt", required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--weights", help="directory of UNet weight containers")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("enhance", help="refine a video in overlapping chunks")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--mode", choices=MODES, default="randomized")
    e.add_argument("--tprime", type=int)
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="compute metrics into a CSV")
    v.add_argument("--in", dest="input", required=True)
    v.add_argument("--metrics", default=",".join(DEFAULT_METRICS))
    v.add_argument("--embeddings", help="JSON list of per-frame lists of identity vectors")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)

    x = sub.add_parser("xtslice", help="write an X-T slice as a PGM image")
    x.add_argument("--in", dest="input", required=True)
    x.add_argument("--row", type=int, required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_xtslice)

    a = sub.add_parser("ablate-blending", help="compare refinement modes on a toy video")
    a.add_argument("--frames", type=int, default=88)
    a.add_argument("--seeds", type=int, default=8)
    a.add_argument("--tprime", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = io.load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.FormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except StaticVideoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
