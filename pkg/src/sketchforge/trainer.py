"""Optimization loop: sample a camera, render, apply the conditioned
distillation gradient plus sketch-consistency and regularizer gradients,
and step the field parameters with Adam.

Per-iteration randomness is derived statelessly from (seed, iteration), so
a restored checkpoint continues exactly like an uninterrupted run.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import field as vfield
from . import render as vrender
from . import schedule as vschedule
from .field import CheckpointError, FieldGradients, VoxelGrid
from .guidance import (
    GuidanceProvider,
    GuidanceRequest,
    cfg_combine,
    lambda_policy,
    sds_grad_image,
    view_prompt,
)
from .sketchloss import SketchImage, SketchLossProvider

TRAINER_MAGIC = b"SKTR"
TRAINER_VERSION = 1

_OPACITY_EPS = 1e-8


@dataclass
class TrainConfig:
    """Full knob surface for a run. Angles in radians, sizes in pixels."""

    iterations: int = 10000
    seed: int = 0
    prompt: str = ""
    # render
    render_size: int = 64
    n_samples: int = 64
    stratified: bool = True
    background: float = 0.0  # 0 = black, 1 = white
    fov_y: float = float(np.radians(50.0))
    # grid
    grid_resolution: int = 64
    grid_extent: float = 1.0  # bounds are [-extent, extent]^3
    initial_sigma: float = 0.1
    density_activation: str = "softplus"
    # camera distribution
    camera_mode: str = "random"  # random | fixed (sketch view) | cycle
    radius_min: float = 2.5
    radius_max: float = 3.0
    elevation_min: float = float(np.radians(-10.0))
    elevation_max: float = float(np.radians(45.0))
    # sketch view registration + conditioning policy
    sketch_azimuth: float = 0.0
    sketch_elevation: float = float(np.radians(15.0))
    lambda_tolerance: float = float(np.radians(15.0))
    # schedule
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    weighting: str = "one_minus_alpha_bar"
    clamp_timesteps: bool = True
    # loss weights
    guidance_scale: float = 100.0
    weight_sds: float = 1.0
    weight_sketch: float = 0.0
    sketch_every_n: int = 1
    weight_emptiness: float = 1e-2
    emptiness_beta: float = 10.0
    weight_center_depth: float = 1e-1
    center_depth_margin: float = 0.5
    # optimizer
    lr_density: float = 5e-2
    lr_color: float = 2e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    # io
    checkpoint_every: int = 1000
    probe_every: int = 25

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.radius_min <= 0.0:
            raise ValueError("camera radius must be positive")
        for name in ("weight_sds", "weight_sketch", "weight_emptiness",
                     "weight_center_depth"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")

    def make_schedule(self) -> vschedule.NoiseSchedule:
        return vschedule.linear_schedule(
            self.schedule_T, self.beta_start, self.beta_end, self.weighting
        )

    def make_grid(self) -> VoxelGrid:
        r = self.grid_resolution
        e = self.grid_extent
        return vfield.make_grid(
            resolution=(r, r, r),
            bounds_min=(-e, -e, -e),
            bounds_max=(e, e, e),
            initial_sigma=self.initial_sigma,
            density_activation=self.density_activation,
        )


@dataclass
class OptimizerState:
    """Adam accumulators for both parameter groups."""

    m_density: np.ndarray
    v_density: np.ndarray
    m_color: np.ndarray
    v_color: np.ndarray
    step: int = 0

    @classmethod
    def init(cls, grid: VoxelGrid) -> "OptimizerState":
        return cls(
            m_density=np.zeros(grid.resolution, dtype=np.float64),
            v_density=np.zeros(grid.resolution, dtype=np.float64),
            m_color=np.zeros(grid.resolution + (3,), dtype=np.float64),
            v_color=np.zeros(grid.resolution + (3,), dtype=np.float64),
        )


def adam_step(grid: VoxelGrid, grads: FieldGradients, state: OptimizerState,
              config: TrainConfig) -> None:
    """One Adam update in place. Parameters stay float32; moments float64."""
    state.step += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for m, v, g, theta, lr in (
        (state.m_density, state.v_density, grads.d_density_logits,
         grid.density_logits, config.lr_density),
        (state.m_color, state.v_color, grads.d_color_feats,
         grid.color_feats, config.lr_color),
    ):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        theta[...] = (theta.astype(np.float64) - update).astype(np.float32)


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Stateless per-iteration generator, stable across checkpoint restores."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(iteration,)))


def sample_camera(config: TrainConfig, rng: np.random.Generator) -> vrender.CameraPose:
    """Random pose on a sphere looking at the origin: azimuth uniform on the
    circle, elevation uniform in the configured band."""
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    elevation = rng.uniform(config.elevation_min, config.elevation_max)
    radius = rng.uniform(config.radius_min, config.radius_max)
    return vrender.turntable_pose(azimuth, elevation, radius,
                                  config.render_size, config.fov_y)


def pose_angles(pose: vrender.CameraPose) -> tuple[float, float]:
    """(azimuth, elevation) of an origin-centered pose, recovered from position."""
    x, y, z = pose.position
    azimuth = float(np.arctan2(y, x) % (2.0 * np.pi))
    elevation = float(np.arcsin(np.clip(z / np.linalg.norm(pose.position), -1.0, 1.0)))
    return azimuth, elevation


def emptiness_loss(weights: np.ndarray, beta: float = 10.0):
    """Mean over samples of log(1 + beta * w): discourages floaters.

    Returns (scalar, exact gradient w.r.t. weights).
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0.0):
        raise ValueError("sample weights must be nonnegative")
    loss = float(np.mean(np.log1p(beta * w)))
    grad = beta / (1.0 + beta * w) / w.size
    return loss, grad


def center_depth_loss(
    depth: np.ndarray,
    final_transmittance: np.ndarray,
    margin: float = 0.5,
    center_frac: float = 0.5,
):
    """Hinge that wants the central crop's opacity-weighted depth to be
    nearer than the border's by at least the margin.

    loss = max(0, mean_center_depth - mean_border_depth + margin), with both
    means weighted by per-pixel opacity (1 - transmittance). Regions with no
    opacity contribute nothing (empty scenes score 0). Returns
    (scalar, d_depth, d_final_transmittance).
    """
    depth = np.asarray(depth, dtype=np.float64)
    trans = np.asarray(final_transmittance, dtype=np.float64)
    h, w = depth.shape
    opacity = 1.0 - trans

    cy0, cy1 = int(round(h * (0.5 - center_frac / 2))), int(round(h * (0.5 + center_frac / 2)))
    cx0, cx1 = int(round(w * (0.5 - center_frac / 2))), int(round(w * (0.5 + center_frac / 2)))
    center = np.zeros((h, w), dtype=bool)
    center[cy0:cy1, cx0:cx1] = True
    border = ~center

    zero = (0.0, np.zeros_like(depth), np.zeros_like(trans))
    s_c = opacity[center].sum()
    s_b = opacity[border].sum()
    if s_c <= _OPACITY_EPS or s_b <= _OPACITY_EPS:
        return zero
    mu_c = float((opacity[center] * depth[center]).sum() / s_c)
    mu_b = float((opacity[border] * depth[border]).sum() / s_b)
    violation = mu_c - mu_b + margin
    if violation <= 0.0:
        return zero

    d_depth = np.zeros_like(depth)
    d_opacity = np.zeros_like(depth)
    d_depth[center] = opacity[center] / s_c
    d_depth[border] = -opacity[border] / s_b
    d_opacity[center] = (depth[center] - mu_c) / s_c
    d_opacity[border] = -(depth[border] - mu_b) / s_b
    return float(violation), d_depth, -d_opacity


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for [0, 1] images, in dB."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


class Trainer:
    """Owns the grid, optimizer state, and per-step orchestration."""

    def __init__(
        self,
        grid: VoxelGrid,
        config: TrainConfig,
        schedule: vschedule.NoiseSchedule,
        guidance_provider: GuidanceProvider,
        sketch_provider: SketchLossProvider | None = None,
        sketch: SketchImage | None = None,
        view_cycle=None,  # list of (azimuth, elevation, radius) for camera_mode="cycle"
        probe_pose: vrender.CameraPose | None = None,
        probe_target: np.ndarray | None = None,
    ):
        self.grid = grid
        self.config = config
        self.schedule = schedule
        self.guidance_provider = guidance_provider
        self.sketch_provider = sketch_provider
        self.sketch = sketch
        self.view_cycle = view_cycle
        self.probe_pose = probe_pose
        self.probe_target = probe_target
        self.optimizer = OptimizerState.init(grid)
        self.iteration = 0
        self.last_image_grad = None  # introspection for the accounting check
        if config.camera_mode == "cycle" and not view_cycle:
            raise ValueError("camera_mode='cycle' needs a view_cycle list")

    # --- camera selection ---

    def _pose_for_iteration(self, i: int, rng: np.random.Generator) -> vrender.CameraPose:
        cfg = self.config
        if cfg.camera_mode == "fixed":
            return vrender.turntable_pose(
                cfg.sketch_azimuth, cfg.sketch_elevation,
                0.5 * (cfg.radius_min + cfg.radius_max),
                cfg.render_size, cfg.fov_y,
            )
        if cfg.camera_mode == "cycle":
            az, el, radius = self.view_cycle[i % len(self.view_cycle)]
            return vrender.turntable_pose(az, el, radius, cfg.render_size, cfg.fov_y)
        return sample_camera(cfg, rng)

    # --- one optimization step ---

    def train_step(self, iteration: int) -> dict:
        cfg = self.config
        sched = self.schedule
        rng = iteration_rng(cfg.seed, iteration)

        pose = self._pose_for_iteration(iteration, rng)
        azimuth, elevation = pose_angles(pose)
        t = vschedule.sample_timestep(sched, rng, clamp=cfg.clamp_timesteps)
        render_seed = int(rng.integers(0, 2**63))
        provider_seed = int(rng.integers(0, 2**63))

        out, cache = vrender.render_with_cache(
            self.grid, pose, n_samples=cfg.n_samples,
            stratified=cfg.stratified, seed=render_seed,
            background=cfg.background,
        )
        eps = rng.standard_normal(out.rgb.shape)

        image_grad = np.zeros_like(out.rgb)
        loss_sds = 0.0
        if cfg.weight_sds > 0.0:
            lam = 0.0
            if self.sketch is not None:
                lam = lambda_policy(azimuth, cfg.sketch_azimuth, cfg.lambda_tolerance)
            req = GuidanceRequest(
                x_t=vschedule.add_noise(sched, vschedule.to_guidance_domain(out.rgb), t, eps),
                t=t,
                prompt=view_prompt(cfg.prompt, azimuth, elevation),
                sketch=None if self.sketch is None else self.sketch.strokes,
                lam=lam,
                seed=provider_seed,
                azimuth=azimuth,
                elevation=elevation,
            )
            eps_hat = cfg_combine(self.guidance_provider.predict(req), cfg.guidance_scale)
            image_grad += cfg.weight_sds * sds_grad_image(eps_hat, eps, t, sched)
            loss_sds = cfg.weight_sds * float(
                vschedule.weight(sched, t) * np.mean((eps_hat - eps) ** 2)
            )

        loss_sketch = 0.0
        if (
            cfg.weight_sketch > 0.0
            and self.sketch_provider is not None
            and self.sketch is not None
            and iteration % cfg.sketch_every_n == 0
        ):
            sk_loss, d_x = self.sketch_provider.evaluate(out.rgb, self.sketch)
            image_grad += cfg.weight_sketch * d_x
            loss_sketch = cfg.weight_sketch * float(sk_loss)

        d_weights = None
        loss_emptiness = 0.0
        if cfg.weight_emptiness > 0.0:
            le, dw = emptiness_loss(out.weights, cfg.emptiness_beta)
            d_weights = cfg.weight_emptiness * dw
            loss_emptiness = cfg.weight_emptiness * le

        d_depth = None
        d_trans = None
        loss_center = 0.0
        if cfg.weight_center_depth > 0.0:
            lc, dd, dt = center_depth_loss(
                out.depth, out.final_transmittance, cfg.center_depth_margin
            )
            d_depth = cfg.weight_center_depth * dd
            d_trans = cfg.weight_center_depth * dt
            loss_center = cfg.weight_center_depth * lc

        self.last_image_grad = image_grad
        grads = vrender.backward_from_cache(
            self.grid, cache, image_grad,
            d_depth=d_depth,
            d_final_transmittance=d_trans,
            d_weights=d_weights,
        )
        adam_step(self.grid, grads, self.optimizer, cfg)
        self.iteration = iteration + 1

        metrics = {
            "iter": iteration,
            "loss_sds": loss_sds,
            "loss_sketch": loss_sketch,
            "loss_emptiness": loss_emptiness,
            "loss_center_depth": loss_center,
        }
        if (
            self.probe_pose is not None
            and self.probe_target is not None
            and iteration % cfg.probe_every == 0
        ):
            probe = vrender.render(
                self.grid, self.probe_pose, n_samples=cfg.n_samples,
                stratified=False, seed=0, background=cfg.background,
            )
            metrics["psnr_probe"] = psnr(probe.rgb, self.probe_target)
        return metrics

    # --- full runs ---

    def run(
        self,
        iterations: int | None = None,
        metrics_path=None,
        checkpoint_dir=None,
        start_iteration: int | None = None,
    ) -> list[dict]:
        cfg = self.config
        total = cfg.iterations if iterations is None else iterations
        start = self.iteration if start_iteration is None else start_iteration
        history = []
        sink = open(metrics_path, "a") if metrics_path else None
        try:
            for i in range(start, total):
                metrics = self.train_step(i)
                history.append(metrics)
                if sink:
                    sink.write(json.dumps(metrics) + "\n")
                    sink.flush()
                if checkpoint_dir and cfg.checkpoint_every > 0 and (i + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(
                        os.path.join(checkpoint_dir, f"ckpt_{i + 1:06d}.sktr"),
                        self.grid, self.optimizer, i + 1,
                    )
        finally:
            if sink:
                sink.close()
        return history


# --- trainer checkpoints: grid + optimizer state, bitwise round trip ---

_SKTR_HEAD = struct.Struct("<4sIQQ5d Q")


def save_checkpoint(path, grid: VoxelGrid, optimizer: OptimizerState, iteration: int,
                    config: TrainConfig | None = None) -> None:
    grid_block = vfield.grid_to_bytes(grid)
    buf = io.BytesIO()
    lrs = (config.lr_density, config.lr_color, config.adam_beta1,
           config.adam_beta2, config.adam_eps) if config else (0.0,) * 5
    buf.write(_SKTR_HEAD.pack(TRAINER_MAGIC, TRAINER_VERSION, iteration,
                              optimizer.step, *lrs, len(grid_block)))
    buf.write(grid_block)
    for arr in (optimizer.m_density, optimizer.v_density):
        buf.write(arr.ravel(order="F").astype("<f8").tobytes())
    for arr in (optimizer.m_color, optimizer.v_color):
        for ch in range(3):
            buf.write(arr[..., ch].ravel(order="F").astype("<f8").tobytes())
    data = buf.getvalue()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[VoxelGrid, OptimizerState, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _SKTR_HEAD.size:
        raise CheckpointError("trainer checkpoint truncated: incomplete header")
    magic, version, iteration, step, *rest = _SKTR_HEAD.unpack_from(data, 0)
    if magic != TRAINER_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {TRAINER_MAGIC!r}")
    if version != TRAINER_VERSION:
        raise CheckpointError(f"unsupported trainer checkpoint version {version}")
    grid_len = rest[-1]
    off = _SKTR_HEAD.size
    if len(data) < off + grid_len:
        raise CheckpointError("trainer checkpoint truncated: incomplete grid block")
    grid = vfield.grid_from_bytes(data[off:off + grid_len])
    off += grid_len
    n = grid.n_vertices
    expected = off + 8 * (2 * n + 2 * 3 * n)
    if len(data) != expected:
        raise CheckpointError(
            f"trainer checkpoint has {len(data)} bytes, expected {expected}"
        )
    nx, ny, nz = grid.resolution

    def take(count):
        nonlocal off
        out = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
        off += count * 8
        return out

    m_d = take(n).reshape((nx, ny, nz), order="F")
    v_d = take(n).reshape((nx, ny, nz), order="F")
    m_c = np.stack([take(n).reshape((nx, ny, nz), order="F") for _ in range(3)], axis=-1)
    v_c = np.stack([take(n).reshape((nx, ny, nz), order="F") for _ in range(3)], axis=-1)
    opt = OptimizerState(
        m_density=np.ascontiguousarray(m_d),
        v_density=np.ascontiguousarray(v_d),
        m_color=np.ascontiguousarray(m_c),
        v_color=np.ascontiguousarray(v_c),
        step=step,
    )
    return grid, opt, iteration
