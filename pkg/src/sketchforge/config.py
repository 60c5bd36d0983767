"""Run configuration: a flat, typed key=value file plus flag overrides.

Every run directory gets a manifest (written before iteration 1) and an
echo of the fully resolved configuration, so config + manifest suffice to
reproduce the run with local providers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .trainer import TrainConfig

TOOL_VERSION = "0.1.0"

PROVIDERS = ("dirac", "remote")
BACKGROUNDS = {"black": 0.0, "white": 1.0}


class ConfigError(Exception):
    """Unknown key, bad value, or an inconsistent run setup."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _deg(s: str) -> float:
    return float(np.radians(float(s)))


# file key -> (converter, TrainConfig attribute or None for extras)
SCHEMA = {
    "prompt": (str, "prompt"),
    "iterations": (int, "iterations"),
    "seed": (int, "seed"),
    "render.size": (int, "render_size"),
    "render.n_samples": (int, "n_samples"),
    "render.stratified": (_parse_bool, "stratified"),
    "render.background": (str, None),
    "render.fov_deg": (_deg, "fov_y"),
    "grid.resolution": (int, "grid_resolution"),
    "grid.extent": (float, "grid_extent"),
    "grid.initial_sigma": (float, "initial_sigma"),
    "grid.density_activation": (str, "density_activation"),
    "camera.mode": (str, "camera_mode"),
    "camera.radius_min": (float, "radius_min"),
    "camera.radius_max": (float, "radius_max"),
    "camera.elevation_min_deg": (_deg, "elevation_min"),
    "camera.elevation_max_deg": (_deg, "elevation_max"),
    "sketch_view.azimuth_deg": (_deg, "sketch_azimuth"),
    "sketch_view.elevation_deg": (_deg, "sketch_elevation"),
    "schedule.T": (int, "schedule_T"),
    "schedule.beta_start": (float, "beta_start"),
    "schedule.beta_end": (float, "beta_end"),
    "schedule.weighting": (str, "weighting"),
    "schedule.clamp_timesteps": (_parse_bool, "clamp_timesteps"),
    "guidance.provider": (str, None),
    "guidance.scale": (float, "guidance_scale"),
    "guidance.lambda_tolerance_deg": (_deg, "lambda_tolerance"),
    "loss.sds_weight": (float, "weight_sds"),
    "sketch_loss.weight": (float, "weight_sketch"),
    "sketch_loss.every_n": (int, "sketch_every_n"),
    "loss.emptiness_weight": (float, "weight_emptiness"),
    "loss.emptiness_beta": (float, "emptiness_beta"),
    "loss.center_depth_weight": (float, "weight_center_depth"),
    "loss.center_depth_margin": (float, "center_depth_margin"),
    "optim.lr_density": (float, "lr_density"),
    "optim.lr_color": (float, "lr_color"),
    "optim.beta1": (float, "adam_beta1"),
    "optim.beta2": (float, "adam_beta2"),
    "optim.eps": (float, "adam_eps"),
    "checkpoint.every_n": (int, "checkpoint_every"),
    "probe.every_n": (int, "probe_every"),
    "service.base_url": (str, None),
    "service.timeout": (float, None),
    "service.max_retries": (int, None),
}

EXTRA_DEFAULTS = {
    "render.background": "black",
    "guidance.provider": "dirac",
    "service.base_url": "http://127.0.0.1:8421",
    "service.timeout": 30.0,
    "service.max_retries": 2,
}


def parse_config_file(path) -> dict:
    """Read `key = value` lines; '#' starts a comment line, blanks ignored."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            conv, _attr = SCHEMA[key]
            try:
                values[key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


@dataclass
class RunConfig:
    """Resolved training config plus non-trainer extras."""

    train: TrainConfig
    provider: str
    background_name: str
    service_base_url: str
    service_timeout: float
    service_max_retries: int
    resolved: dict  # flat key -> raw resolved value, echoed into the manifest
    explicit_keys: frozenset  # keys the user actually set (file or flags)


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, file values, and flag overrides (highest priority)."""
    merged = dict(EXTRA_DEFAULTS)
    explicit = set()
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
            explicit.add(key)

    kwargs = {SCHEMA[k][1]: v for k, v in merged.items() if SCHEMA[k][1] is not None}

    background_name = merged.get("render.background", "black")
    if background_name not in BACKGROUNDS:
        raise ConfigError(f"render.background must be one of {sorted(BACKGROUNDS)}")
    kwargs["background"] = BACKGROUNDS[background_name]

    provider = merged.get("guidance.provider", "dirac")
    if provider not in PROVIDERS:
        raise ConfigError(f"guidance.provider must be one of {PROVIDERS}")

    try:
        train = TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if train.camera_mode not in ("random", "fixed"):
        raise ConfigError("camera.mode must be 'random' or 'fixed'")

    resolved = dict(merged)
    resolved["render.background"] = background_name
    resolved["guidance.provider"] = provider
    return RunConfig(
        train=train,
        provider=provider,
        background_name=background_name,
        service_base_url=str(merged["service.base_url"]),
        service_timeout=float(merged["service.timeout"]),
        service_max_retries=int(merged["service.max_retries"]),
        resolved=resolved,
        explicit_keys=frozenset(explicit),
    )


def write_resolved_config(run: RunConfig, path) -> None:
    lines = [f"{key} = {run.resolved[key]}" for key in sorted(run.resolved)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Self-describing run record, immutable for the run."""

    tool_version: str
    prompt: str
    seed: int
    provider: str
    sketch: dict | None  # {path, sha256, stroke_polarity, size} or None
    config: dict

    def write(self, path) -> None:
        payload = {
            "tool_version": self.tool_version,
            "prompt": self.prompt,
            "seed": self.seed,
            "provider": self.provider,
            "sketch": self.sketch,
            "config": {k: self.config[k] for k in sorted(self.config)},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
