"""Diffusion-time machinery: beta schedule, closed-form noising, reverse step.

Timesteps are 1-based (t in 1..T). Images live in [0, 1] everywhere else in
the pipeline; the [-1, 1] guidance-domain remap used around noising lives
here so the renderer never sees it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHTINGS = ("constant", "one_minus_alpha_bar")

# d(guidance domain)/d(image domain) for the [0,1] -> [-1,1] remap.
GUIDANCE_DOMAIN_SCALE = 2.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta_t, alpha_t, alpha_bar_t, eta_t for t = 1..T."""

    T: int
    beta: np.ndarray  # (T,)
    alpha: np.ndarray  # (T,) 1 - beta
    alpha_bar: np.ndarray  # (T,) cumulative product, strictly decreasing
    eta: np.ndarray  # (T,) sqrt(beta)
    weighting: str = "one_minus_alpha_bar"

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if not np.all((self.beta > 0.0) & (self.beta < 1.0)):
            raise ValueError("beta values must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")

    def _check_t(self, t: int, lo: int = 1):
        if not (lo <= t <= self.T):
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")

    def beta_t(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_t(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_t(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def eta_t(self, t: int) -> float:
        self._check_t(t)
        return float(self.eta[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "weighting": self.weighting,
                "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def linear_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    weighting: str = "one_minus_alpha_bar",
) -> NoiseSchedule:
    """The de-facto standard linear beta schedule."""
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=np.cumprod(alpha),
        eta=np.sqrt(beta),
        weighting=weighting,
    )


def to_guidance_domain(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] image values to the [-1, 1] domain the prior operates in."""
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


def from_guidance_domain(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def add_noise(schedule: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Closed form of t iterated forward-noising steps:

    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
    """
    schedule._check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0's shape")
    ab = schedule.alpha_bar_t(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_step(
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    eps_pred: np.ndarray,
    eps_draw: np.ndarray,
) -> np.ndarray:
    """One reverse reconstruction step:

    x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_pred)
              / sqrt(alpha_t) + eta_t * eps_draw
    """
    schedule._check_t(t, lo=2)
    x_t = np.asarray(x_t, dtype=np.float64)
    a = schedule.alpha_t(t)
    ab = schedule.alpha_bar_t(t)
    mean = (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * np.asarray(eps_pred)) / np.sqrt(a)
    return mean + schedule.eta_t(t) * np.asarray(eps_draw)


def weight(schedule: NoiseSchedule, t: int) -> float:
    """Timestep weighting w(t) applied to the distillation gradient."""
    schedule._check_t(t)
    if schedule.weighting == "constant":
        return 1.0
    return 1.0 - schedule.alpha_bar_t(t)


def sample_timestep(
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    clamp: bool = True,
) -> int:
    """Draw t uniformly; by default clamped to [0.02T, 0.98T] to avoid the
    degenerate schedule extremes (set clamp=False for the full {1..T} range).
    """
    if clamp:
        lo = max(1, int(np.ceil(0.02 * schedule.T)))
        hi = min(schedule.T, int(np.floor(0.98 * schedule.T)))
    else:
        lo, hi = 1, schedule.T
    return int(rng.integers(lo, hi + 1))
