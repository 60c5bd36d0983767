"""Dense voxel radiance field: the optimizable 3D scene representation.

A grid stores raw parameters (density logits, color features) at vertices.
Queries activate per vertex, then trilinearly interpolate the activated
values, so density is nonnegative and color stays in [0, 1]^3 everywhere
and interpolation is exactly linear in the activated vertex values.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SKFG"
FORMAT_VERSION = 1

DENSITY_ACTIVATIONS = ("softplus", "relu", "exp")
COLOR_ACTIVATIONS = ("sigmoid",)


class CheckpointError(Exception):
    """Raised when a grid/trainer checkpoint file is malformed."""


@dataclass
class VoxelGrid:
    """Scene parameters: per-vertex density logits and color features."""

    resolution: tuple[int, int, int]
    bounds_min: np.ndarray  # (3,) float64, world units
    bounds_max: np.ndarray  # (3,) float64
    density_logits: np.ndarray  # (Nx, Ny, Nz) float32
    color_feats: np.ndarray  # (Nx, Ny, Nz, 3) float32
    density_activation: str = "softplus"
    color_activation: str = "sigmoid"

    def __post_init__(self):
        nx, ny, nz = self.resolution
        if min(nx, ny, nz) < 2:
            raise ValueError(f"grid resolution must be >= 2 per axis, got {self.resolution}")
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        if not np.all(self.bounds_max > self.bounds_min):
            raise ValueError("bounds must have strictly positive extent on all axes")
        if self.density_activation not in DENSITY_ACTIVATIONS:
            raise ValueError(f"unknown density activation {self.density_activation!r}")
        if self.color_activation not in COLOR_ACTIVATIONS:
            raise ValueError(f"unknown color activation {self.color_activation!r}")
        if self.density_logits.shape != (nx, ny, nz):
            raise ValueError("density_logits shape does not match resolution")
        if self.color_feats.shape != (nx, ny, nz, 3):
            raise ValueError("color_feats shape does not match resolution")
        self.density_logits = np.ascontiguousarray(self.density_logits, dtype=np.float32)
        self.color_feats = np.ascontiguousarray(self.color_feats, dtype=np.float32)

    @property
    def n_vertices(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(
            resolution=self.resolution,
            bounds_min=self.bounds_min.copy(),
            bounds_max=self.bounds_max.copy(),
            density_logits=self.density_logits.copy(),
            color_feats=self.color_feats.copy(),
            density_activation=self.density_activation,
            color_activation=self.color_activation,
        )


@dataclass
class FieldGradients:
    """Parameter-space gradients, same shapes as the grid arrays (float64)."""

    d_density_logits: np.ndarray
    d_color_feats: np.ndarray

    def __iadd__(self, other: "FieldGradients") -> "FieldGradients":
        self.d_density_logits += other.d_density_logits
        self.d_color_feats += other.d_color_feats
        return self

    @classmethod
    def zeros_like(cls, grid: VoxelGrid) -> "FieldGradients":
        return cls(
            d_density_logits=np.zeros(grid.resolution, dtype=np.float64),
            d_color_feats=np.zeros(grid.resolution + (3,), dtype=np.float64),
        )


def make_grid(
    resolution: tuple[int, int, int] = (64, 64, 64),
    bounds_min=(-1.0, -1.0, -1.0),
    bounds_max=(1.0, 1.0, 1.0),
    initial_sigma: float = 0.1,
    density_activation: str = "softplus",
    color_activation: str = "sigmoid",
) -> VoxelGrid:
    """Create a grid initialized to a faint uniform fog with mid-gray color."""
    nx, ny, nz = resolution
    if initial_sigma <= 0.0:
        logit0 = -30.0 if density_activation != "relu" else 0.0
    elif density_activation == "softplus":
        logit0 = float(np.log(np.expm1(initial_sigma)))
    elif density_activation == "exp":
        logit0 = float(np.log(initial_sigma))
    else:  # relu
        logit0 = float(initial_sigma)
    return VoxelGrid(
        resolution=resolution,
        bounds_min=np.asarray(bounds_min, dtype=np.float64),
        bounds_max=np.asarray(bounds_max, dtype=np.float64),
        density_logits=np.full((nx, ny, nz), logit0, dtype=np.float32),
        color_feats=np.zeros((nx, ny, nz, 3), dtype=np.float32),
        density_activation=density_activation,
        color_activation=color_activation,
    )


# --- activations (float64 in, float64 out) ---

def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "softplus":
        return np.logaddexp(0.0, x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "exp":
        return np.exp(x)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    raise ValueError(f"unknown activation {name!r}")


def _act_deriv(name: str, x: np.ndarray) -> np.ndarray:
    if name == "softplus":
        return 1.0 / (1.0 + np.exp(-x))
    if name == "relu":
        return (x > 0.0).astype(np.float64)
    if name == "exp":
        return np.exp(x)
    if name == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-x))
        return s * (1.0 - s)
    raise ValueError(f"unknown activation {name!r}")


def activated_vertex_values(grid: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    """Activated density (Nv,) and color (Nv, 3) at every vertex, float64."""
    logits = grid.density_logits.astype(np.float64).reshape(-1)
    feats = grid.color_feats.astype(np.float64).reshape(-1, 3)
    return _act(grid.density_activation, logits), _act(grid.color_activation, feats)


def interp_coeffs(grid: VoxelGrid, pts: np.ndarray, checked: bool = True):
    """Trilinear interpolation coefficients for a batch of world points.

    Returns (inside, idx, w): boolean mask (M,), flat vertex indices (M, 8)
    and weights (M, 8). Weights of points outside the bounds are zeroed.
    Vertex i lies at bounds_min + i * cell along each axis, so a query at a
    vertex puts weight 1 on that vertex. ``checked=False`` skips the
    finiteness validation for internal callers whose points are constructed
    from already-validated inputs.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    if checked and not np.all(np.isfinite(pts)):
        raise ValueError("non-finite query point")
    flat = pts.reshape(-1, 3)
    res = np.asarray(grid.resolution, dtype=np.int64)
    extent = grid.bounds_max - grid.bounds_min
    rel = (flat - grid.bounds_min) / extent
    inside = np.all((rel >= 0.0) & (rel <= 1.0), axis=1)

    g = rel * (res - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
    f = g - i0  # in [0, 1] inside bounds (frac 1.0 at the far face)

    nx, ny, nz = grid.resolution
    base = i0[:, 0] * (ny * nz) + i0[:, 1] * nz + i0[:, 2]
    # Corner c has axis offsets (bx, by, bz) = bits of c.
    offsets = np.array(
        [bx * (ny * nz) + by * nz + bz
         for bx in (0, 1) for by in (0, 1) for bz in (0, 1)],
        dtype=np.int64,
    )
    idx = base[:, None] + offsets[None, :]

    wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
    wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
    wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
    w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    w[~inside] = 0.0
    # Outside points may index garbage corners; clamp them to a valid vertex.
    idx[~inside] = 0
    return inside, idx, w


def query(grid: VoxelGrid, p: np.ndarray, d: np.ndarray | None = None):
    """Evaluate the field: (sigma, color) at world point(s) p.

    ``p`` is (3,) or (..., 3); direction ``d`` is accepted for interface
    compatibility and ignored (the dense grid is Lambertian). Points outside
    the bounds return sigma 0 and color (0, 0, 0).
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    sigma_v, color_v = activated_vertex_values(grid)
    inside, idx, w = interp_coeffs(grid, p)
    sigma = np.einsum("mc,mc->m", w, sigma_v[idx])
    color = np.einsum("mc,mcr->mr", w, color_v[idx])
    shape = p.shape[:-1]
    sigma = sigma.reshape(shape)
    color = color.reshape(shape + (3,))
    if single:
        return float(sigma), color.reshape(3)
    return sigma, color


def accumulate_vertex_grads(
    grid: VoxelGrid,
    idx: np.ndarray,
    w: np.ndarray,
    d_sigma: np.ndarray,
    d_color: np.ndarray,
):
    """Scatter per-point gradients w.r.t. activated values onto vertices.

    Uses bincount per corner so the reduction order is fixed and runs are
    reproducible. Returns (d_sigma_v (Nv,), d_color_v (Nv, 3)) in
    activated-value space.
    """
    nv = grid.n_vertices
    flat_idx = idx.reshape(-1)
    d_sigma_v = np.bincount(flat_idx, weights=(w * d_sigma[:, None]).reshape(-1),
                            minlength=nv)
    d_color_v = np.empty((nv, 3), dtype=np.float64)
    for ch in range(3):
        d_color_v[:, ch] = np.bincount(
            flat_idx, weights=(w * d_color[:, ch:ch + 1]).reshape(-1), minlength=nv
        )
    return d_sigma_v, d_color_v


def vertex_grads_to_parameters(grid: VoxelGrid, d_sigma_v, d_color_v) -> FieldGradients:
    """Chain activated-value gradients through the activations to raw parameters."""
    logits = grid.density_logits.astype(np.float64).reshape(-1)
    feats = grid.color_feats.astype(np.float64).reshape(-1, 3)
    dd = d_sigma_v * _act_deriv(grid.density_activation, logits)
    dc = d_color_v * _act_deriv(grid.color_activation, feats)
    return FieldGradients(
        d_density_logits=dd.reshape(grid.resolution),
        d_color_feats=dc.reshape(grid.resolution + (3,)),
    )


def query_backward(
    grid: VoxelGrid,
    p: np.ndarray,
    d: np.ndarray | None,
    d_sigma: np.ndarray,
    d_c: np.ndarray,
) -> FieldGradients:
    """Exact gradients of query outputs w.r.t. grid parameters.

    Accepts the same batched ``p`` as :func:`query`; each point touches at
    most its 8 cell corners; out-of-bounds points contribute nothing.
    """
    p = np.asarray(p, dtype=np.float64)
    d_sigma = np.asarray(d_sigma, dtype=np.float64).reshape(-1)
    d_c = np.asarray(d_c, dtype=np.float64).reshape(-1, 3)
    if not (np.all(np.isfinite(d_sigma)) and np.all(np.isfinite(d_c))):
        raise ValueError("non-finite upstream gradient")
    inside, idx, w = interp_coeffs(grid, p)
    if d_sigma.shape[0] != idx.shape[0] or d_c.shape[0] != idx.shape[0]:
        raise ValueError("upstream gradient count does not match point count")
    d_sigma_v, d_color_v = accumulate_vertex_grads(grid, idx, w, d_sigma, d_c)
    return vertex_grads_to_parameters(grid, d_sigma_v, d_color_v)


# --- checkpoint file format ---
#
# Header: magic "SKFG", version u32, Nx Ny Nz u32, bounds 6 x float64
# (min xyz then max xyz). Payload: little-endian float32 planes in
# x-fastest order: density logits, then color features channel by channel.

_HEADER = struct.Struct("<4sIIII6d")


def grid_to_bytes(grid: VoxelGrid) -> bytes:
    nx, ny, nz = grid.resolution
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            MAGIC, FORMAT_VERSION, nx, ny, nz,
            *grid.bounds_min.tolist(), *grid.bounds_max.tolist(),
        )
    )
    buf.write(grid.density_logits.ravel(order="F").astype("<f4").tobytes())
    for ch in range(3):
        buf.write(grid.color_feats[..., ch].ravel(order="F").astype("<f4").tobytes())
    return buf.getvalue()


def grid_from_bytes(
    data: bytes,
    density_activation: str = "softplus",
    color_activation: str = "sigmoid",
) -> VoxelGrid:
    if len(data) < _HEADER.size:
        raise CheckpointError("grid file truncated: incomplete header")
    magic, version, nx, ny, nz, *bounds = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported grid format version {version}")
    if min(nx, ny, nz) < 2:
        raise CheckpointError("invalid resolution in header")
    n = nx * ny * nz
    expected = _HEADER.size + 4 * n * 4
    if len(data) != expected:
        raise CheckpointError(
            f"grid file has {len(data)} bytes, expected {expected}"
        )
    planes = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(4, n)
    density = planes[0].reshape((nx, ny, nz), order="F")
    color = np.stack(
        [planes[1 + ch].reshape((nx, ny, nz), order="F") for ch in range(3)],
        axis=-1,
    )
    return VoxelGrid(
        resolution=(nx, ny, nz),
        bounds_min=np.array(bounds[:3]),
        bounds_max=np.array(bounds[3:]),
        density_logits=density.astype(np.float32),
        color_feats=color.astype(np.float32),
        density_activation=density_activation,
        color_activation=color_activation,
    )


def save_grid(grid: VoxelGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(grid_to_bytes(grid))


def load_grid(path, **kwargs) -> VoxelGrid:
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read(), **kwargs)
