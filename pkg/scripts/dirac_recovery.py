#!/usr/bin/env python3
"""Fixed-point recovery experiment: drive a fresh field toward a single
rendered target view with the analytic Dirac provider and plot the PSNR
trail. Useful when tuning learning rates or sample counts.

    python3 scripts/dirac_recovery.py --iterations 500 --size 64
"""

import argparse
import time

import numpy as np

from sketchforge import guidance, render, schedule, trainer
from sketchforge.field import save_grid


def blob_scene(res):
    from sketchforge import field

    grid = field.make_grid((res, res, res), initial_sigma=0.0)
    xs = np.linspace(-1, 1, res)
    x, y, z = np.meshgrid(xs, xs, xs, indexing="ij")
    r = np.sqrt(x**2 + (1.3 * y) ** 2 + (0.8 * z) ** 2)
    sigma = 30.0 * np.clip(1 - r / 0.55, 0, 1) ** 2
    grid.density_logits[:] = np.where(
        sigma > 1e-6, np.log(np.expm1(np.maximum(sigma, 1e-6))), -12.0
    ).astype(np.float32)
    feats = np.clip(np.stack([
        0.5 + 0.5 * np.sin(3 * x),
        0.5 + 0.5 * np.cos(4 * y),
        0.5 + 0.5 * np.sin(5 * z),
    ], axis=-1), 0.02, 0.98)
    grid.color_feats[:] = np.log(feats / (1 - feats)).astype(np.float32)
    return grid


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--iterations", type=int, default=500)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--n-samples", type=int, default=48)
    parser.add_argument("--grid", type=int, default=64)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--save", help="write the optimized field here (.skfg)")
    args = parser.parse_args()

    cfg = trainer.TrainConfig(
        iterations=args.iterations, seed=args.seed, render_size=args.size,
        n_samples=args.n_samples, grid_resolution=args.grid,
        camera_mode="fixed", guidance_scale=0.0, weight_sketch=0.0,
        weight_emptiness=0.0, weight_center_depth=0.0, probe_every=25,
    )
    sched = cfg.make_schedule()
    pose = render.turntable_pose(cfg.sketch_azimuth, cfg.sketch_elevation, 2.75,
                                 args.size, cfg.fov_y)
    target = render.render(blob_scene(48), pose, n_samples=args.n_samples).rgb
    provider = guidance.DiracGuidanceProvider(
        sched, schedule.to_guidance_domain(target))
    tr = trainer.Trainer(cfg.make_grid(), cfg, sched, provider,
                         probe_pose=pose, probe_target=target)

    start = time.time()
    history = tr.run()
    elapsed = time.time() - start
    probes = [(m["iter"], m["psnr_probe"]) for m in history if "psnr_probe" in m]
    for it, value in probes:
        print(f"iter {it:5d}  psnr {value:6.2f} dB")
    print(f"{args.iterations} iterations in {elapsed:.1f}s "
          f"({elapsed / args.iterations * 1000:.0f} ms/iter)")
    if args.save:
        save_grid(tr.grid, args.save)
        print(f"saved field to {args.save}")


if __name__ == "__main__":
    main()
