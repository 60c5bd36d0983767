"""Guidance providers and the conditioned score-distillation gradient.

A provider turns a noised render into conditional/unconditional noise
predictions. Classifier-free guidance combines them with scale s; the
distillation gradient treats the combined prediction as a constant and
multiplies the residual by the timestep weighting, so only the renderer's
Jacobian is ever differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import GUIDANCE_DOMAIN_SCALE, NoiseSchedule, to_guidance_domain, weight


@dataclass
class GuidanceRequest:
    """Inputs for one noise-prediction call.

    ``x_t`` is in the guidance domain; ``prompt`` is already view-augmented;
    ``sketch`` (single-channel strokes in [0, 1]) may be None. ``azimuth`` and
    ``elevation`` carry the camera pose for providers that are view-aware
    (local oracles); the wire protocol does not transmit them.
    """

    x_t: np.ndarray  # (H, W, 3)
    t: int
    prompt: str
    sketch: np.ndarray | None
    lam: float
    seed: int
    azimuth: float | None = None
    elevation: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must lie in [0, 1]")
        if not np.all(np.isfinite(self.x_t)):
            raise ValueError("x_t must be finite")


@dataclass
class GuidanceResponse:
    eps_cond: np.ndarray
    eps_uncond: np.ndarray


class GuidanceProvider:
    """Interface: deterministic noise prediction given the request seed."""

    name = "abstract"

    def predict(self, req: GuidanceRequest) -> GuidanceResponse:
        raise NotImplementedError


def cfg_combine(resp: GuidanceResponse, s: float) -> np.ndarray:
    """Classifier-free guidance: eps_cond + s * (eps_cond - eps_uncond)."""
    if resp.eps_cond.shape != resp.eps_uncond.shape:
        raise ValueError("conditional/unconditional prediction shapes differ")
    return resp.eps_cond + s * (resp.eps_cond - resp.eps_uncond)


def sds_grad_image(
    eps_hat: np.ndarray,
    eps: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Image-space factor of the distillation gradient: w(t) * (eps_hat - eps).

    Returned w.r.t. the [0, 1] rendered image, i.e. the [0,1] -> [-1,1]
    remap chain factor is already included; push the result through
    render_backward as the upstream rgb gradient.
    """
    w = weight(schedule, t)
    return w * (np.asarray(eps_hat) - np.asarray(eps)) * GUIDANCE_DOMAIN_SCALE


def dirac_eps(x_t: np.ndarray, target: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Optimal denoiser prediction for a data distribution concentrated at
    ``target`` (guidance domain): (x_t - sqrt(ab_t) * target) / sqrt(1 - ab_t).
    """
    ab = schedule.alpha_bar_t(t)
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)


class DiracGuidanceProvider(GuidanceProvider):
    """Analytic verification oracle: denoises toward fixed target images.

    The conditional target blends text and sketch targets by the request's
    lambda: target(lam) = (1 - lam) * text + lam * sketch, so lam = 0 ignores
    the sketch entirely. Targets and the unconditional target (default: zero
    image) are given in the guidance domain.
    """

    name = "dirac"

    def __init__(
        self,
        schedule: NoiseSchedule,
        target_text: np.ndarray,
        target_sketch: np.ndarray | None = None,
        target_uncond: np.ndarray | None = None,
    ):
        self.schedule = schedule
        self.target_text = np.asarray(target_text, dtype=np.float64)
        self.target_sketch = (
            None if target_sketch is None else np.asarray(target_sketch, dtype=np.float64)
        )
        self.target_uncond = (
            np.zeros_like(self.target_text)
            if target_uncond is None
            else np.asarray(target_uncond, dtype=np.float64)
        )

    def _blend(self, lam: float) -> np.ndarray:
        if self.target_sketch is None or lam == 0.0:
            return self.target_text
        return (1.0 - lam) * self.target_text + lam * self.target_sketch

    def predict(self, req: GuidanceRequest) -> GuidanceResponse:
        target = self._blend(req.lam)
        return GuidanceResponse(
            eps_cond=dirac_eps(req.x_t, target, req.t, self.schedule),
            eps_uncond=dirac_eps(req.x_t, self.target_uncond, req.t, self.schedule),
        )


class DiracViewBank(GuidanceProvider):
    """Dirac oracle with one target per registered view; the request's
    azimuth/elevation select the nearest view on the sphere."""

    name = "dirac-view-bank"

    def __init__(self, schedule: NoiseSchedule, views):
        """``views``: iterable of (azimuth, elevation, target_guidance_domain)."""
        self.schedule = schedule
        self.views = [(float(a), float(e), np.asarray(x, dtype=np.float64)) for a, e, x in views]
        if not self.views:
            raise ValueError("need at least one view")

    def _nearest(self, azimuth: float, elevation: float) -> np.ndarray:
        best, best_d = None, np.inf
        for a, e, target in self.views:
            d = circular_distance(azimuth, a) ** 2 + (elevation - e) ** 2
            if d < best_d:
                best, best_d = target, d
        return best

    def predict(self, req: GuidanceRequest) -> GuidanceResponse:
        if req.azimuth is None:
            raise ValueError("view-bank provider needs the request azimuth")
        target = self._nearest(req.azimuth, req.elevation or 0.0)
        return GuidanceResponse(
            eps_cond=dirac_eps(req.x_t, target, req.t, self.schedule),
            eps_uncond=dirac_eps(req.x_t, np.zeros_like(target), req.t, self.schedule),
        )


def circular_distance(a: float, b: float) -> float:
    """Absolute angular distance on the circle, in [0, pi]."""
    d = (a - b) % (2.0 * np.pi)
    return float(min(d, 2.0 * np.pi - d))


def lambda_policy(view_azimuth: float, sketch_azimuth: float, tolerance: float) -> float:
    """Binary sketch-conditioning strength: 1 at the sketch's registered view
    (circular distance <= tolerance, closed interval), 0 elsewhere."""
    return 1.0 if circular_distance(view_azimuth, sketch_azimuth) <= tolerance else 0.0


def procedural_text_target(prompt: str, size: int) -> np.ndarray:
    """Bundled toy target for the Dirac provider: a smooth low-frequency
    color field derived deterministically from the prompt. Guidance domain."""
    import hashlib

    from .sketchloss import bilinear_resize

    seed = int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.15, 0.85, size=(4, 4, 3))
    img = bilinear_resize(coarse, size, size)
    # fade toward the black background away from the image center
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot((yy - (size - 1) / 2), (xx - (size - 1) / 2)) / (size / 2)
    mask = np.clip(1.3 - r, 0.0, 1.0) ** 2
    return to_guidance_domain(img * mask[..., None])


def sketch_guidance_target(strokes: np.ndarray, size: int) -> np.ndarray:
    """Toy sketch-conditioned target: dark ink on a light card. Guidance domain."""
    from .sketchloss import bilinear_resize

    resized = bilinear_resize(np.asarray(strokes, dtype=np.float64), size, size)
    img = np.repeat((1.0 - 0.85 * np.clip(resized, 0.0, 1.0))[..., None], 3, axis=2)
    return to_guidance_domain(img)


def view_prompt(prompt: str, azimuth: float, elevation: float = 0.0) -> str:
    """Append a view-dependent suffix based on camera azimuth.

    Bins: front for |azimuth| <= 45 deg, side for 45 deg < |azimuth| <= 135
    deg, back otherwise (azimuth wrapped to (-180, 180]).
    """
    a = np.degrees(azimuth) % 360.0
    if a > 180.0:
        a -= 360.0
    if abs(a) <= 45.0:
        suffix = "front view"
    elif abs(a) <= 135.0:
        suffix = "side view"
    else:
        suffix = "back view"
    return f"{prompt}, {suffix}"
