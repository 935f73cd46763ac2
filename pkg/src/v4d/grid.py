"""Dense voxel grids with trilinear sampling, its adjoint, and TV regularization.

Grids map an axis-aligned world box onto a cell-centered lattice: the lattice
coordinate of a world point is ``u = (p - min) / (max - min) * (N - 1)``, so
queries at lattice nodes reproduce stored values exactly.

Storage is float32 (the checkpoint wire format); all sampling math runs in a
caller-chosen compute dtype, float64 by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Aabb:
    """Axis-aligned box in world units, min strictly below max per axis."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if self.min.shape != (3,) or self.max.shape != (3,):
            raise ValueError("Aabb corners must be 3-vectors")
        if not np.all(self.min < self.max):
            raise ValueError(f"Aabb min {self.min} must be < max {self.max} componentwise")

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        return np.all((points >= self.min) & (points <= self.max), axis=-1)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))


@dataclass
class VoxelGrid:
    """Dense lattice of feature vectors over an Aabb.

    data has shape (Nx, Ny, Nz, C), float32. Serialization order is
    channel-fastest, then x, then y, then z (see data.py).
    """

    dims: tuple[int, int, int]
    channels: int
    bbox: Aabb
    data: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"invalid grid dims {self.dims}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        shape = (*self.dims, self.channels)
        if self.data is None:
            self.data = np.zeros(shape, dtype=np.float32)
        else:
            self.data = np.ascontiguousarray(self.data, dtype=np.float32)
            if self.data.shape != shape:
                raise ValueError(f"data shape {self.data.shape} != {shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("grid data contains non-finite values")

    @property
    def cell_size(self) -> np.ndarray:
        """World-space spacing between adjacent lattice nodes, per axis."""
        dims = np.array(self.dims, dtype=np.float64)
        return self.bbox.extent / np.maximum(dims - 1.0, 1.0)

    def zeros_like_data(self, dtype=np.float64) -> np.ndarray:
        return np.zeros(self.data.shape, dtype=dtype)


@dataclass
class TrilinearCache:
    """Per-query corner indices/weights saved by a forward sample call."""

    flat_index: np.ndarray      # (S, 8) int, into data.reshape(-1, C)
    weights: np.ndarray         # (S, 8)
    axis_weights: np.ndarray    # (S, 3, 2): per-axis (1-f, f)
    corner_values: np.ndarray | None  # (S, 8, C), kept when point grads are needed
    grid_shape: tuple
    lattice_scale: np.ndarray   # (3,): d(lattice coord)/d(world coord)


_CORNER_BITS = np.array(
    [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)  # (8, 3)


def _lattice_setup(grid: VoxelGrid, points: np.ndarray, dtype):
    points = np.asarray(points, dtype=dtype)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (S, 3), got {points.shape}")
    lo = grid.bbox.min.astype(dtype)
    hi = grid.bbox.max.astype(dtype)
    if points.size and (np.any(points < lo) or np.any(points > hi)):
        bad = np.where(~grid.bbox.contains(points))[0][0]
        raise ValueError(f"point {points[bad]} outside grid bbox [{lo}, {hi}]")
    dims = np.array(grid.dims, dtype=dtype)
    scale = (dims - 1.0) / (hi - lo)
    u = (points - lo) * scale
    i0 = np.floor(u).astype(np.int64)
    # queries exactly on the far face land in the last cell with fraction 1
    i0 = np.minimum(i0, np.array(grid.dims, dtype=np.int64) - 2)
    i0 = np.maximum(i0, 0)
    frac = u - i0
    return i0, frac, scale


def trilinear_sample(
    grid: VoxelGrid,
    points: np.ndarray,
    *,
    dtype=np.float64,
    want_cache: bool = False,
    want_point_grad: bool = False,
):
    """Sample the grid at world-space points by trilinear interpolation.

    Points must lie inside the grid bbox (boundary inclusive); anything
    outside raises. Returns (S, C) values, plus a TrilinearCache when
    want_cache is set.
    """
    i0, frac, scale = _lattice_setup(grid, points, dtype)
    S = i0.shape[0]
    nx, ny, nz = grid.dims
    C = grid.channels

    # (S, 3, 2) per-axis weights for the low/high corner along each axis
    aw = np.empty((S, 3, 2), dtype=dtype)
    aw[:, :, 1] = frac
    aw[:, :, 0] = 1.0 - frac

    bits = _CORNER_BITS  # (8, 3)
    idx = (
        (i0[:, None, 0] + bits[None, :, 0]) * (ny * nz)
        + (i0[:, None, 1] + bits[None, :, 1]) * nz
        + (i0[:, None, 2] + bits[None, :, 2])
    )  # (S, 8)
    w = (
        aw[:, 0, :][:, bits[:, 0]]
        * aw[:, 1, :][:, bits[:, 1]]
        * aw[:, 2, :][:, bits[:, 2]]
    )  # (S, 8)

    flat = grid.data.reshape(-1, C)
    corners = flat[idx].astype(dtype)  # (S, 8, C)
    values = np.einsum("sk,skc->sc", w, corners)

    if not (want_cache or want_point_grad):
        return values
    cache = TrilinearCache(
        flat_index=idx,
        weights=w,
        axis_weights=aw,
        corner_values=corners if want_point_grad else None,
        grid_shape=grid.data.shape,
        lattice_scale=np.asarray(scale, dtype=dtype),
    )
    return values, cache


def trilinear_adjoint_from_cache(cache: TrilinearCache, upstream: np.ndarray, dtype=np.float64):
    """Scatter upstream (S, C) cotangents back onto the grid cells.

    Accumulation goes through np.bincount per channel, which sums in input
    order: the reduction is deterministic for a fixed query order.
    """
    upstream = np.asarray(upstream, dtype=dtype)
    S, C = upstream.shape
    if cache.weights.shape[0] != S:
        raise ValueError(f"upstream rows {S} != cached queries {cache.weights.shape[0]}")
    ncells = int(np.prod(cache.grid_shape[:3]))
    idx = cache.flat_index.ravel()
    grad = np.empty((ncells, C), dtype=dtype)
    for c in range(C):
        contrib = (cache.weights * upstream[:, c : c + 1]).ravel()
        grad[:, c] = np.bincount(idx, weights=contrib, minlength=ncells)
    return grad.reshape(cache.grid_shape)


def trilinear_adjoint(grid: VoxelGrid, points: np.ndarray, upstream: np.ndarray, *, dtype=np.float64):
    """Gradient of sum_k <upstream_k, sample_k> w.r.t. every grid cell."""
    upstream = np.asarray(upstream, dtype=dtype)
    points = np.asarray(points)
    if upstream.shape != (points.shape[0], grid.channels):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match "
            f"({points.shape[0]}, {grid.channels})"
        )
    _, cache = trilinear_sample(grid, points, dtype=dtype, want_cache=True)
    return trilinear_adjoint_from_cache(cache, upstream, dtype=dtype)


def trilinear_point_gradient(cache: TrilinearCache, upstream: np.ndarray, dtype=np.float64):
    """Gradient of sum_k <upstream_k, sample_k> w.r.t. the query points (world units)."""
    if cache.corner_values is None:
        raise ValueError("forward pass was not run with want_point_grad=True")
    upstream = np.asarray(upstream, dtype=dtype)
    # dot each corner's value with its upstream cotangent: (S, 8)
    cdot = np.einsum("skc,sc->sk", cache.corner_values, upstream)
    bits = _CORNER_BITS
    aw = cache.axis_weights
    grad = np.empty((upstream.shape[0], 3), dtype=dtype)
    sign = np.where(bits == 1, 1.0, -1.0)  # d(weight)/d(frac) flips sign for low corners
    for a in range(3):
        o1, o2 = (a + 1) % 3, (a + 2) % 3
        dw = sign[:, a][None, :] * aw[:, o1, :][:, bits[:, o1]] * aw[:, o2, :][:, bits[:, o2]]
        grad[:, a] = (cdot * dw).sum(axis=1) * cache.lattice_scale[a]
    return grad


def total_variation(grid: VoxelGrid, *, dtype=np.float64, data: np.ndarray | None = None):
    """Smooth TV penalty: mean squared forward difference over neighbor pairs.

    Averages over channels and all valid pairs along x, y, z. Returns
    (value, gradient) with the gradient shaped like grid.data. Every axis
    must have at least 2 cells.
    """
    if any(d < 2 for d in grid.dims):
        raise ValueError(f"total_variation needs dims >= 2 along every axis, got {grid.dims}")
    a = grid.data.astype(dtype, copy=False) if data is None else np.asarray(data, dtype=dtype)
    nx, ny, nz = grid.dims
    C = grid.channels
    npairs = C * ((nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1))

    dx = a[1:, :, :, :] - a[:-1, :, :, :]
    dy = a[:, 1:, :, :] - a[:, :-1, :, :]
    dz = a[:, :, 1:, :] - a[:, :, :-1, :]
    value = (np.vdot(dx, dx) + np.vdot(dy, dy) + np.vdot(dz, dz)) / npairs

    grad = np.zeros_like(a)
    coef = 2.0 / npairs
    grad[1:, :, :, :] += dx
    grad[:-1, :, :, :] -= dx
    grad[:, 1:, :, :] += dy
    grad[:, :-1, :, :] -= dy
    grad[:, :, 1:, :] += dz
    grad[:, :, :-1, :] -= dz
    grad *= coef
    return float(value), grad
