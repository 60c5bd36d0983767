"""Shared test utilities: random fixtures, finite-difference oracles, and an
independent reference quadrature for the volume renderer."""

from __future__ import annotations

import numpy as np

from sketchforge import field as vfield
from sketchforge import render as vrender


def make_random_grid(seed, resolution=(4, 4, 4), density_activation="softplus",
                     logit_loc=-1.0, logit_scale=0.8):
    rng = np.random.default_rng(seed)
    grid = vfield.make_grid(resolution=resolution,
                            density_activation=density_activation)
    grid.density_logits[:] = rng.normal(
        logit_loc, logit_scale, resolution).astype(np.float32)
    grid.color_feats[:] = rng.normal(
        0.0, 0.5, resolution + (3,)).astype(np.float32)
    return grid


def perturbed_pair(grid, v_density, v_color, h):
    """Grids at theta +/- h*v with the step realized in float32, plus the
    realized half-steps (removes quantization error from FD estimates)."""
    gp, gm = grid.copy(), grid.copy()
    gp.density_logits = (grid.density_logits.astype(np.float64) + h * v_density).astype(np.float32)
    gp.color_feats = (grid.color_feats.astype(np.float64) + h * v_color).astype(np.float32)
    gm.density_logits = (grid.density_logits.astype(np.float64) - h * v_density).astype(np.float32)
    gm.color_feats = (grid.color_feats.astype(np.float64) - h * v_color).astype(np.float32)
    dd = (gp.density_logits.astype(np.float64) - gm.density_logits.astype(np.float64)) / 2.0
    dc = (gp.color_feats.astype(np.float64) - gm.color_feats.astype(np.float64)) / 2.0
    return gp, gm, dd, dc


def directional_check(f, grid, grads, rng, h=1e-3):
    """Compare the analytic directional derivative of scalar f(grid) against
    central differences along a random direction. Returns (fd, analytic)."""
    v_d = rng.standard_normal(grid.density_logits.shape)
    v_c = rng.standard_normal(grid.color_feats.shape)
    gp, gm, dd, dc = perturbed_pair(grid, v_d, v_c, h)
    fd = (f(gp) - f(gm)) / 2.0
    analytic = float((grads.d_density_logits * dd).sum() + (grads.d_color_feats * dc).sum())
    return fd, analytic


def rel_err(a, b):
    denom = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / denom


def reference_composite(sigma, color, ks, k_f):
    """Independent alpha-compositing oracle for a single ray, written as the
    plain sequential recurrence."""
    n = len(ks)
    trans = 1.0
    rgb = np.zeros(3)
    depth_num = 0.0
    wsum = 0.0
    for i in range(n):
        delta = (ks[i + 1] - ks[i]) if i + 1 < n else (k_f - ks[i])
        alpha = 1.0 - np.exp(-sigma[i] * delta)
        w = trans * alpha
        rgb = rgb + w * color[i]
        depth_num += w * ks[i]
        wsum += w
        trans *= 1.0 - alpha
    depth = depth_num / max(wsum, 1e-10)
    return rgb, depth, trans


def reference_render_ray(sigma_fn, color_fn, origin, direction, k_n, k_f, n):
    """Fine-step midpoint quadrature of the rendering integral using the
    sequential reference recurrence; independent of the production path."""
    h = (k_f - k_n) / n
    ks = k_n + (np.arange(n) + 0.5) * h
    pts = origin[None, :] + ks[:, None] * direction[None, :]
    sigma = np.array([sigma_fn(p) for p in pts])
    color = np.array([color_fn(p) for p in pts])
    return reference_composite(sigma, color, ks, k_f)


def synthetic_blob_grid(res=64, seed=None):
    """A smooth, exactly-representable test scene: an ellipsoidal blob with
    position-dependent color inside unit bounds."""
    grid = vfield.make_grid((res, res, res), initial_sigma=0.0)
    xs = np.linspace(-1.0, 1.0, res)
    x, y, z = np.meshgrid(xs, xs, xs, indexing="ij")
    r = np.sqrt(x**2 + (1.3 * y) ** 2 + (0.8 * z) ** 2)
    sigma = 30.0 * np.clip(1.0 - r / 0.55, 0.0, 1.0) ** 2
    logits = np.where(sigma > 1e-6, np.log(np.expm1(np.maximum(sigma, 1e-6))), -12.0)
    grid.density_logits[:] = logits.astype(np.float32)
    cr = 0.5 + 0.5 * np.sin(3 * x)
    cg = 0.5 + 0.5 * np.cos(4 * y)
    cb = 0.5 + 0.5 * np.sin(5 * z)
    feats = np.stack([cr, cg, cb], axis=-1)
    feats = np.clip(feats, 0.02, 0.98)
    grid.color_feats[:] = np.log(feats / (1.0 - feats)).astype(np.float32)
    return grid


def fixed_pose(azimuth=0.0, elevation=0.26, size=32, radius=2.75,
               fov_y=np.radians(50.0)):
    return vrender.turntable_pose(azimuth, elevation, radius, size, fov_y)
