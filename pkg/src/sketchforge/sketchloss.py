"""Sketch-consistency loss: estimate a sketch from the render, embed both
sketches, and minimize negative cosine similarity.

The local stand-ins keep the full gradient path testable without pretrained
weights: the photo-to-sketch operator is a difference-of-Gaussians edge
detector squashed into [0, 1], and the embedding is average pooling over a
fixed cell grid followed by a fixed seeded random projection and L2
normalization. Every stage has a hand-derived exact adjoint; a remote
provider can swap in learned models behind the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

DOG_SIGMA1 = 1.0  # pixels
DOG_SIGMA2 = 1.6
DOG_GAIN = 100.0  # response = tanh(gain * dog^2)

EMBED_DIM = 512
EMBED_INPUT_SIZE = 224
POOL_CELLS = 14  # 14x14 cells of 16x16 px over the 224x224 input
PROJECTION_SEED = 731
EPS_BIAS_SCALE = 1e-6  # keeps the pre-normalization vector away from zero

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class SketchImage:
    """Single-channel stroke map, 1 = stroke ink, 0 = blank."""

    strokes: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        self.strokes = np.asarray(self.strokes, dtype=np.float64)
        if self.strokes.ndim != 2:
            raise ValueError("sketch must be a single-channel image")
        if not np.all(np.isfinite(self.strokes)):
            raise ValueError("sketch values must be finite")
        if self.strokes.min() < 0.0 or self.strokes.max() > 1.0:
            raise ValueError("sketch values must lie in [0, 1]")


@dataclass
class EmbeddingVector:
    values: np.ndarray  # (EMBED_DIM,)
    normalized: bool = True


class SketchLossProvider:
    """Interface: evaluate(x, sketch) -> (loss in [-1, 1], d_loss/dx)."""

    name = "abstract"

    def evaluate(self, x: np.ndarray, sketch: SketchImage):
        raise NotImplementedError


# --- separable Gaussian blur, self-adjoint under 'reflect' padding ---

@lru_cache(maxsize=None)
def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(4.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = _gaussian_kernel(sigma)
    out = correlate1d(np.asarray(img, dtype=np.float64), k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def dog_filter(img: np.ndarray) -> np.ndarray:
    """Band-pass: blur at sigma1 minus blur at sigma2. Self-adjoint."""
    return gaussian_blur(img, DOG_SIGMA1) - gaussian_blur(img, DOG_SIGMA2)


# --- the local photo-to-sketch operator G ---

def sketch_estimate_forward(x: np.ndarray):
    """DoG edge response of the luma image, squashed smoothly into [0, 1).

    Returns (SketchImage, cache for the backward pass).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError("expected an (H, W, 3) image")
    gray = x @ LUMA
    dog = dog_filter(gray)
    strokes = np.tanh(DOG_GAIN * dog * dog)
    return SketchImage(strokes=strokes), (dog, strokes)


def sketch_estimate_backward(cache, d_strokes: np.ndarray) -> np.ndarray:
    """d(strokes)/d(x): chain through tanh, the DoG (its own adjoint), luma."""
    dog, strokes = cache
    d_dog = d_strokes * (1.0 - strokes**2) * DOG_GAIN * 2.0 * dog
    d_gray = dog_filter(d_dog)
    return d_gray[..., None] * LUMA


def local_sketch_estimate(x: np.ndarray) -> SketchImage:
    """The local differentiable photo-to-sketch operator."""
    sketch, _ = sketch_estimate_forward(x)
    return sketch


# --- differentiable bilinear resize (exact linear map + transpose) ---

@lru_cache(maxsize=None)
def resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Dense (out_size, in_size) bilinear interpolation matrix
    (half-pixel centers, edge clamped)."""
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    lo = np.floor(src)
    t = src - lo
    i0 = np.clip(lo.astype(np.int64), 0, in_size - 1)
    i1 = np.clip(lo.astype(np.int64) + 1, 0, in_size - 1)
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def _apply_row_col(mat_rows: np.ndarray, img: np.ndarray, mat_cols: np.ndarray) -> np.ndarray:
    """rows @ img @ cols^T along the leading two axes, channels untouched."""
    out = np.tensordot(mat_rows, img, axes=(1, 0))
    out = np.tensordot(out, mat_cols, axes=(1, 1))  # (H', C?, W') or (H', W')
    if img.ndim == 3:
        out = np.moveaxis(out, -1, 1)
    return out


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W) or (H, W, C) images; linear in the input."""
    img = np.asarray(img, dtype=np.float64)
    rh = resize_matrix(img.shape[0], out_h)
    rw = resize_matrix(img.shape[1], out_w)
    return _apply_row_col(rh, img, rw)


def bilinear_resize_adjoint(d_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Transpose of bilinear_resize for gradient transport."""
    d_out = np.asarray(d_out, dtype=np.float64)
    rh = resize_matrix(in_h, d_out.shape[0])
    rw = resize_matrix(in_w, d_out.shape[1])
    return _apply_row_col(rh.T, d_out, rw.T)


# --- the local embedding encoder E ---

@lru_cache(maxsize=None)
def _projection() -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(PROJECTION_SEED)
    n_cells = POOL_CELLS * POOL_CELLS
    proj = rng.standard_normal((EMBED_DIM, n_cells)) / np.sqrt(n_cells)
    bias = rng.standard_normal(EMBED_DIM) * EPS_BIAS_SCALE
    return proj, bias


def embed_forward(values: np.ndarray):
    """Embed a stroke map: resize to 224, cell-average-pool, project, normalize.

    The fixed epsilon bias is always added before normalization so the map is
    smooth and an all-zero sketch still embeds deterministically.
    Returns (EmbeddingVector, cache).
    """
    values = np.asarray(values, dtype=np.float64)
    in_h, in_w = values.shape
    resized = (
        values
        if values.shape == (EMBED_INPUT_SIZE, EMBED_INPUT_SIZE)
        else bilinear_resize(values, EMBED_INPUT_SIZE, EMBED_INPUT_SIZE)
    )
    cell = EMBED_INPUT_SIZE // POOL_CELLS
    pooled = resized.reshape(POOL_CELLS, cell, POOL_CELLS, cell).mean(axis=(1, 3))
    proj, bias = _projection()
    raw = proj @ pooled.reshape(-1) + bias
    norm = np.linalg.norm(raw)
    emb = raw / norm
    return EmbeddingVector(values=emb), (in_h, in_w, emb, norm)


def embed_backward(cache, d_emb: np.ndarray) -> np.ndarray:
    in_h, in_w, emb, norm = cache
    proj, _ = _projection()
    d_raw = (d_emb - emb * (emb @ d_emb)) / norm
    d_pooled = (proj.T @ d_raw).reshape(POOL_CELLS, POOL_CELLS)
    cell = EMBED_INPUT_SIZE // POOL_CELLS
    d_resized = np.repeat(np.repeat(d_pooled, cell, axis=0), cell, axis=1) / (cell * cell)
    if (in_h, in_w) == (EMBED_INPUT_SIZE, EMBED_INPUT_SIZE):
        return d_resized
    return bilinear_resize_adjoint(d_resized, in_h, in_w)


def local_embed(sketch: SketchImage) -> EmbeddingVector:
    """The local embedding encoder (normalized 512-vector)."""
    emb, _ = embed_forward(sketch.strokes)
    return emb


class LocalSketchLossProvider(SketchLossProvider):
    """Fully local, deterministic loss with an exact hand-chained gradient."""

    name = "local"

    def evaluate(self, x: np.ndarray, sketch: SketchImage):
        x = np.asarray(x, dtype=np.float64)
        h, w = x.shape[:2]
        rx = bilinear_resize(x, EMBED_INPUT_SIZE, EMBED_INPUT_SIZE)
        estimated, g_cache = sketch_estimate_forward(rx)
        e_est, e_cache = embed_forward(estimated.strokes)
        e_ref = local_embed(sketch)
        loss = -float(e_est.values @ e_ref.values)

        d_emb = -e_ref.values
        d_strokes = embed_backward(e_cache, d_emb)
        d_rx = sketch_estimate_backward(g_cache, d_strokes)
        d_x = bilinear_resize_adjoint(d_rx, h, w)
        return loss, d_x


def sketch_loss(provider: SketchLossProvider, x: np.ndarray, sketch: SketchImage):
    """Negative cosine similarity between estimated and input sketch
    embeddings, with the gradient w.r.t. the rendered image."""
    return provider.evaluate(x, sketch)


def load_sketch_png(path) -> tuple[SketchImage, dict]:
    """Load a sketch PNG as a single-channel stroke map.

    Stroke polarity is auto-detected: a majority-light image means dark
    pixels are strokes. Returns the sketch plus metadata for the run manifest.
    """
    gray = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    dark_strokes = bool(gray.mean() > 0.5)
    strokes = 1.0 - gray if dark_strokes else gray
    meta = {
        "path": str(path),
        "stroke_polarity": "dark" if dark_strokes else "light",
        "size": [int(strokes.shape[0]), int(strokes.shape[1])],
    }
    return SketchImage(strokes=strokes), meta


def save_sketch_png(sketch: SketchImage, path) -> None:
    """Write a stroke map as a majority-light PNG (ink is dark)."""
    arr = np.clip(np.round((1.0 - sketch.strokes) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
