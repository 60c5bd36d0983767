"""Model bundles: the diffusion prior with sketch conditioning, the image
embedding encoder, and the photo-to-sketch estimator behind one interface.

The synthetic bundle is a fully deterministic, CPU-sized stand-in chain in
torch (float64): an optimal-denoiser prior aimed at a prompt-derived target
with lambda-scaled sketch conditioning, a difference-of-Gaussians sketch
estimator, and a pooled random-projection embedding. It keeps the protocol,
determinism, and gradient semantics of the real deployment testable on a
desktop. The pretrained bundle loads actual ControlNet-scribble / CLIP /
photo-to-sketch weights when those are installed and downloaded.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F

SCHEDULE_T = 1000
BETA_START = 1e-4
BETA_END = 2e-2

EMBED_DIM = 512
EMBED_INPUT_SIZE = 224
POOL_KERNEL = 16
PROJECTION_SEED = 48151
DOG_SIGMA1 = 1.1
DOG_SIGMA2 = 1.8
DOG_GAIN = 90.0
EPS_BIAS_SCALE = 1e-6

_DTYPE = torch.float64


class BundleError(Exception):
    pass


class ModelBundle:
    """One loaded model stack; all methods must be deterministic given the
    request seed and run under the caller's inference lock."""

    name = "abstract"

    def predict_eps(self, x_t: np.ndarray, t: int, prompt: str, lam: float,
                    sketch: np.ndarray | None, seed: int):
        raise NotImplementedError

    def sketch_loss(self, x: np.ndarray, sketch: np.ndarray):
        raise NotImplementedError

    def info(self) -> dict:
        raise NotImplementedError


def _gaussian_kernel1d(sigma: float) -> torch.Tensor:
    radius = max(1, int(np.ceil(4.0 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=_DTYPE)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    # img: (1, 1, H, W); separable gaussian with reflect padding
    k = _gaussian_kernel1d(sigma)
    r = (len(k) - 1) // 2
    kv = k.view(1, 1, -1, 1)
    kh = k.view(1, 1, 1, -1)
    out = F.conv2d(F.pad(img, (0, 0, r, r), mode="reflect"), kv)
    return F.conv2d(F.pad(out, (r, r, 0, 0), mode="reflect"), kh)


class SyntheticBundle(ModelBundle):
    name = "synthetic"

    def __init__(self):
        self.alpha_bar = torch.cumprod(
            1.0 - torch.linspace(BETA_START, BETA_END, SCHEDULE_T, dtype=_DTYPE), dim=0
        )
        gen = torch.Generator().manual_seed(PROJECTION_SEED)
        cells = (EMBED_INPUT_SIZE // POOL_KERNEL) ** 2
        self.projection = torch.randn(EMBED_DIM, cells, generator=gen, dtype=_DTYPE)
        self.projection /= np.sqrt(cells)
        self.eps_bias = torch.randn(EMBED_DIM, generator=gen, dtype=_DTYPE) * EPS_BIAS_SCALE

    # --- the prior ---

    def _prompt_target(self, prompt: str, h: int, w: int) -> torch.Tensor:
        """Smooth low-frequency color field derived from the prompt, in [0, 1]."""
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") % (2**63))
        coarse = 0.15 + 0.7 * torch.rand(1, 3, 4, 4, generator=gen, dtype=_DTYPE)
        img = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)
        yy = torch.linspace(-1.0, 1.0, h, dtype=_DTYPE).view(-1, 1)
        xx = torch.linspace(-1.0, 1.0, w, dtype=_DTYPE).view(1, -1)
        fade = torch.clamp(1.25 - torch.sqrt(yy**2 + xx**2), 0.0, 1.0) ** 2
        return (img[0] * fade).permute(1, 2, 0)  # (H, W, 3)

    def _conditioned_target(self, prompt: str, lam: float,
                            sketch: np.ndarray | None, h: int, w: int) -> torch.Tensor:
        base = self._prompt_target(prompt, h, w)
        if sketch is None:
            return base
        ink = torch.from_numpy(np.ascontiguousarray(sketch)).to(_DTYPE)
        ink = F.interpolate(ink.view(1, 1, *ink.shape), size=(h, w),
                            mode="bilinear", align_corners=False)[0, 0]
        # lambda scales the conditioning itself: lam = 0 erases the sketch
        ink = float(lam) * torch.clamp(ink, 0.0, 1.0)
        lit = torch.clamp(base + 0.35 * ink.unsqueeze(-1), 0.0, 1.0)
        return lit * (1.0 - 0.9 * ink.unsqueeze(-1)) + 0.95 * ink.unsqueeze(-1) * (1.0 - lit)

    def predict_eps(self, x_t, t, prompt, lam, sketch, seed):
        if not (1 <= t <= SCHEDULE_T):
            raise BundleError(f"timestep {t} outside [1, {SCHEDULE_T}]")
        if not (0.0 <= lam <= 1.0):
            raise BundleError("lambda outside [0, 1]")
        with torch.no_grad():
            xt = torch.from_numpy(np.ascontiguousarray(x_t)).to(_DTYPE)
            h, w = xt.shape[:2]
            ab = self.alpha_bar[t - 1]
            cond = 2.0 * self._conditioned_target(prompt, lam, sketch, h, w) - 1.0
            uncond = torch.zeros_like(cond)  # mid-gray in the guidance domain
            eps_cond = (xt - torch.sqrt(ab) * cond) / torch.sqrt(1.0 - ab)
            eps_uncond = (xt - torch.sqrt(ab) * uncond) / torch.sqrt(1.0 - ab)
        return (eps_cond.numpy().astype(np.float32),
                eps_uncond.numpy().astype(np.float32))

    # --- photo-to-sketch G and encoder E ---

    def _estimate_sketch(self, img: torch.Tensor) -> torch.Tensor:
        # img: (H, W, 3) in [0, 1]
        luma = img @ torch.tensor([0.299, 0.587, 0.114], dtype=_DTYPE)
        x = luma.unsqueeze(0).unsqueeze(0)
        dog = _blur(x, DOG_SIGMA1) - _blur(x, DOG_SIGMA2)
        return torch.tanh(DOG_GAIN * dog * dog)[0, 0]

    def _embed(self, sketch: torch.Tensor) -> torch.Tensor:
        x = sketch.unsqueeze(0).unsqueeze(0)
        if x.shape[-2:] != (EMBED_INPUT_SIZE, EMBED_INPUT_SIZE):
            x = F.interpolate(x, size=(EMBED_INPUT_SIZE, EMBED_INPUT_SIZE),
                              mode="bilinear", align_corners=False)
        pooled = F.avg_pool2d(x, POOL_KERNEL).reshape(-1)
        raw = self.projection @ pooled + self.eps_bias
        return raw / torch.linalg.norm(raw)

    def sketch_loss(self, x, sketch):
        xt = torch.from_numpy(np.ascontiguousarray(x)).to(_DTYPE).requires_grad_(True)
        resized = F.interpolate(
            xt.permute(2, 0, 1).unsqueeze(0),
            size=(EMBED_INPUT_SIZE, EMBED_INPUT_SIZE),
            mode="bilinear", align_corners=False,
        )[0].permute(1, 2, 0)
        est = self._estimate_sketch(resized)
        e_est = self._embed(est)
        with torch.no_grad():
            ref = torch.from_numpy(np.ascontiguousarray(sketch)).to(_DTYPE)
            e_ref = self._embed(ref)
        loss = -(e_est @ e_ref)
        loss.backward()
        return float(loss.item()), xt.grad.numpy().astype(np.float32)

    def info(self):
        return {
            "bundle": self.name,
            "models": {
                "prior": "synthetic-dirac-denoiser",
                "sketch_estimator": "synthetic-dog",
                "image_encoder": f"synthetic-pooled-projection-{EMBED_DIM}",
            },
            "embedding_dim": EMBED_DIM,
            "schedule_T": SCHEDULE_T,
        }


class PretrainedBundle(ModelBundle):
    """Placeholder seam for the real model stack.

    A deployment provides three pieces behind this interface: a
    sketch-conditioned diffusion prior (scribble-conditioned latent
    diffusion; the conditioning image is scaled by lambda before the
    forward pass so lambda = 0 degrades to the text-only prior), a CLIP
    ViT-B/32 image encoder producing normalized 512-d embeddings, and a
    differentiable photo-to-sketch network; sketch_loss must return the
    autograd input-gradient of -E(G(x))^T E(I_s). Any comparable
    photo-to-sketch model is acceptable provided estimated-vs-input
    ranking holds; /v1/health reports whichever identities are loaded.

    Weights are multi-GB downloads and need a GPU to be useful, so this
    build does not bundle an implementation: constructing it raises with
    instructions rather than shipping unexercised model code.
    """

    name = "pretrained"

    def __init__(self):
        raise BundleError(
            "no pretrained weights are bundled: subclass PretrainedBundle "
            "with your model stack (see the class docstring for the "
            "contract) and serve it via create_app(bundle=...)"
        )


def load_bundle(name: str) -> ModelBundle:
    if name == "synthetic":
        return SyntheticBundle()
    if name == "pretrained":
        return PretrainedBundle()
    raise BundleError(f"unknown bundle {name!r}")
