"""Command-line surface: generate, turntable, eval-sketch, health.

Exit codes: 0 ok, 2 config error, 3 transport error, 4 corrupt checkpoint.
SKETCHFORGE_SERVICE_URL overrides the configured service base URL.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import render as vrender
from .client import (
    RemoteGuidanceProvider,
    RemoteSketchLossProvider,
    ServiceClient,
    ServiceConfig,
    TransportError,
)
from .config import (
    ConfigError,
    RunConfig,
    RunManifest,
    TOOL_VERSION,
    parse_config_file,
    resolve_config,
    sha256_file,
    write_resolved_config,
)
from .field import CheckpointError, load_grid, save_grid
from .guidance import (
    DiracGuidanceProvider,
    procedural_text_target,
    sketch_guidance_target,
)
from .protocol import ProtocolError
from .sketchloss import LocalSketchLossProvider, load_sketch_png, sketch_loss
from .trainer import Trainer, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3
EXIT_CHECKPOINT = 4


def _service_config(run: RunConfig) -> ServiceConfig:
    url = os.environ.get("SKETCHFORGE_SERVICE_URL", run.service_base_url)
    return ServiceConfig(base_url=url, timeout=run.service_timeout,
                         max_retries=run.service_max_retries)


def _load_checkpoint_grid(path):
    """Accept either a bare field file (SKFG) or a trainer checkpoint (SKTR)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"SKTR":
        grid, _opt, _it = load_checkpoint(path)
        return grid
    return load_grid(path)


def cmd_generate(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    if args.prompt is not None:
        overrides["prompt"] = args.prompt
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.provider is not None:
        overrides["guidance.provider"] = args.provider
    run = resolve_config(file_values, overrides)
    cfg = run.train
    if run.provider == "dirac" and "guidance.scale" not in run.explicit_keys:
        # CFG extrapolates against the oracle's constant unconditional target,
        # which has no sensible fixed point; the analytic provider pairs with
        # s = 0 unless the user asks otherwise.
        cfg = replace(cfg, guidance_scale=0.0)
        run.resolved["guidance.scale"] = 0.0

    sketch = None
    sketch_meta = None
    if args.sketch:
        if not os.path.exists(args.sketch):
            raise ConfigError(f"sketch file not found: {args.sketch}")
        sketch, sketch_meta = load_sketch_png(args.sketch)
        sketch_meta["sha256"] = sha256_file(args.sketch)
    if run.provider == "remote" and sketch is None:
        raise ConfigError("provider 'remote' requires --sketch (the diffusion "
                          "prior is sketch-conditioned)")
    if cfg.weight_sketch > 0.0 and sketch is None:
        raise ConfigError("sketch_loss.weight > 0 requires --sketch")

    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    manifest = RunManifest(
        tool_version=TOOL_VERSION,
        prompt=cfg.prompt,
        seed=cfg.seed,
        provider=run.provider,
        sketch=sketch_meta,
        config=run.resolved,
    )
    manifest.write(os.path.join(out_dir, "manifest.json"))
    write_resolved_config(run, os.path.join(out_dir, "config.resolved"))

    schedule = cfg.make_schedule()
    grid = cfg.make_grid()
    if run.provider == "dirac":
        target_text = procedural_text_target(cfg.prompt, cfg.render_size)
        target_sketch = (
            sketch_guidance_target(sketch.strokes, cfg.render_size)
            if sketch is not None else None
        )
        guidance_provider = DiracGuidanceProvider(
            schedule, target_text, target_sketch=target_sketch
        )
        sketch_provider = LocalSketchLossProvider()
    else:
        client = ServiceClient(_service_config(run))
        guidance_provider = RemoteGuidanceProvider(client)
        sketch_provider = RemoteSketchLossProvider(client)

    trainer = Trainer(
        grid, cfg, schedule, guidance_provider,
        sketch_provider=sketch_provider, sketch=sketch,
    )
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    try:
        trainer.run(metrics_path=metrics_path, checkpoint_dir=ckpt_dir)
    except (TransportError, ProtocolError):
        # flush progress before surfacing the failure
        save_checkpoint(os.path.join(ckpt_dir, "aborted.sktr"),
                        trainer.grid, trainer.optimizer, trainer.iteration, cfg)
        raise

    save_checkpoint(os.path.join(ckpt_dir, "final.sktr"),
                    trainer.grid, trainer.optimizer, trainer.iteration, cfg)
    save_grid(trainer.grid, os.path.join(out_dir, "field.skfg"))
    vrender.export_turntable(
        trainer.grid, os.path.join(out_dir, "turntable"),
        n_frames=8, elevation=cfg.sketch_elevation,
        radius=0.5 * (cfg.radius_min + cfg.radius_max),
        size=cfg.render_size, fov_y=cfg.fov_y,
        n_samples=cfg.n_samples, background=cfg.background,
    )
    print(f"run complete: {out_dir}")
    return EXIT_OK


def cmd_turntable(args) -> int:
    grid = _load_checkpoint_grid(args.checkpoint)
    written = vrender.export_turntable(
        grid, args.out,
        n_frames=args.frames,
        elevation=float(np.radians(args.elevation_deg)),
        radius=args.radius,
        size=args.size,
        fov_y=float(np.radians(args.fov_deg)),
        n_samples=args.n_samples,
        background=0.0 if args.background == "black" else 1.0,
    )
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def cmd_eval_sketch(args) -> int:
    grid = _load_checkpoint_grid(args.checkpoint)
    if not os.path.exists(args.sketch):
        raise ConfigError(f"sketch file not found: {args.sketch}")
    sketch, _ = load_sketch_png(args.sketch)
    provider = LocalSketchLossProvider()

    per_view = []
    for i in range(args.views):
        azimuth = 2.0 * np.pi * i / max(args.views, 1)
        pose = vrender.turntable_pose(
            azimuth, float(np.radians(args.elevation_deg)), args.radius,
            args.size, float(np.radians(args.fov_deg)),
        )
        out = vrender.render(grid, pose, n_samples=args.n_samples)
        loss, _grad = sketch_loss(provider, out.rgb, sketch)
        per_view.append({"azimuth_deg": float(np.degrees(azimuth)), "loss": loss})

    losses = [v["loss"] for v in per_view]
    report = {
        "per_view": per_view,
        "mean": float(np.mean(losses)) if losses else None,
        "std": float(np.std(losses)) if losses else None,
    }
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_health(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    run = resolve_config(file_values, {})
    svc = _service_config(run)
    if args.url:
        svc = ServiceConfig(base_url=args.url, timeout=svc.timeout,
                            max_retries=svc.max_retries)
    client = ServiceClient(svc)
    info = client.health()
    print(json.dumps(info, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sketchforge")
    p.add_argument("--version", action="version", version=TOOL_VERSION)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="optimize a field for a prompt + sketch")
    g.add_argument("--config", help="flat key=value config file")
    g.add_argument("--prompt", help="text prompt")
    g.add_argument("--sketch", help="input sketch PNG")
    g.add_argument("--out", required=True, help="run directory")
    g.add_argument("--provider", choices=("dirac", "remote"))
    g.add_argument("--seed", type=int)
    g.add_argument("--iterations", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("turntable", help="render a turntable from a checkpoint")
    t.add_argument("checkpoint")
    t.add_argument("--out", required=True)
    t.add_argument("--frames", type=int, default=8)
    t.add_argument("--elevation-deg", type=float, default=15.0)
    t.add_argument("--radius", type=float, default=2.75)
    t.add_argument("--size", type=int, default=64)
    t.add_argument("--fov-deg", type=float, default=50.0)
    t.add_argument("--n-samples", type=int, default=64)
    t.add_argument("--background", choices=("black", "white"), default="black")
    t.set_defaults(func=cmd_turntable)

    e = sub.add_parser("eval-sketch", help="score sketch consistency over views")
    e.add_argument("checkpoint")
    e.add_argument("--sketch", required=True)
    e.add_argument("--views", type=int, default=8)
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--elevation-deg", type=float, default=15.0)
    e.add_argument("--radius", type=float, default=2.75)
    e.add_argument("--size", type=int, default=64)
    e.add_argument("--fov-deg", type=float, default=50.0)
    e.add_argument("--n-samples", type=int, default=64)
    e.set_defaults(func=cmd_eval_sketch)

    h = sub.add_parser("health", help="ping the guidance service")
    h.add_argument("--config")
    h.add_argument("--url")
    h.set_defaults(func=cmd_health)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TransportError, ProtocolError) as exc:
        print(f"service error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
