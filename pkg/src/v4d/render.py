"""Ray generation, AABB traversal, point sampling, and alpha compositing.

The compositor follows the standard emission-absorption model: per-segment
opacity ``alpha_i = 1 - exp(-sigma_i * delta_i)``, transmittance
``T_{i+1} = T_i * (1 - alpha_i)`` with ``T_1 = 1``, pixel color
``sum_i T_i alpha_i c_i + T_res * background``, and expected depth
``sum_i T_i alpha_i t_i`` along the ray parameter. Analytic gradients w.r.t.
densities and colors are provided.

Rays with a variable number of samples are stored flat (CSR-style offsets);
compositing scatters them into a zero-padded dense (rays, max_samples) block,
where zero-density padding is exactly neutral.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Aabb


@dataclass
class Camera:
    """Pinhole camera: camera-to-world pose, horizontal fov, image size.

    Camera frame: +x right, +y up, looking along -z (Blender convention).
    """

    c2w: np.ndarray
    fov_x: float
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValueError(f"camera matrix must be 4x4, got {self.c2w.shape}")
        R = self.c2w[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation block is not orthonormal")
        if not (0.0 < self.fov_x < np.pi):
            raise ValueError(f"fov must lie in (0, pi), got {self.fov_x}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)


@dataclass
class Rays:
    """A batch of rays: unit directions, one time index per ray."""

    origins: np.ndarray    # (R, 3)
    dirs: np.ndarray       # (R, 3), unit norm
    times: np.ndarray      # (R,)
    pixels: np.ndarray | None = None  # (R, 2) target (u, v), when known

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64)
        self.dirs = np.asarray(self.dirs, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        norms = np.linalg.norm(self.dirs, axis=-1)
        if self.dirs.size and not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("ray directions must be unit length")

    def __len__(self):
        return self.origins.shape[0]


def generate_rays(camera: Camera, pixels: np.ndarray, t: float) -> Rays:
    """Rays through pixel centers (u+0.5, v+0.5); all carry time index t."""
    pixels = np.atleast_2d(np.asarray(pixels))
    u = pixels[:, 0].astype(np.float64) + 0.5
    v = pixels[:, 1].astype(np.float64) + 0.5
    if np.any(pixels[:, 0] < 0) or np.any(pixels[:, 0] >= camera.width) or np.any(
        pixels[:, 1] < 0
    ) or np.any(pixels[:, 1] >= camera.height):
        raise ValueError("pixel coordinates outside image bounds")
    f = camera.focal
    d_cam = np.stack(
        [
            (u - 0.5 * camera.width) / f,
            -(v - 0.5 * camera.height) / f,
            -np.ones_like(u),
        ],
        axis=-1,
    )
    R = camera.c2w[:3, :3]
    d_world = d_cam @ R.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], d_world.shape).copy()
    times = np.full(len(d_world), float(t))
    return Rays(origins=origins, dirs=d_world, times=times, pixels=pixels.copy())


def all_pixels(width: int, height: int) -> np.ndarray:
    """(W*H, 2) pixel coordinates in row-major image order."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def ray_aabb(origins: np.ndarray, dirs: np.ndarray, box: Aabb):
    """Slab intersection. Returns (t_near >= 0, t_far, hit) per ray."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    lo, hi = box.min, box.max
    near = np.full(o.shape[0], -np.inf)
    far = np.full(o.shape[0], np.inf)
    for a in range(3):
        da = d[:, a]
        oa = o[:, a]
        par = da == 0.0
        with np.errstate(divide="ignore"):
            inv = np.where(par, np.inf, 1.0 / np.where(par, 1.0, da))
        t0 = (lo[a] - oa) * inv
        t1 = (hi[a] - oa) * inv
        a_near = np.minimum(t0, t1)
        a_far = np.maximum(t0, t1)
        inside = (oa >= lo[a]) & (oa <= hi[a])
        # a parallel ray either never constrains the interval or never hits
        a_near = np.where(par, np.where(inside, -np.inf, np.inf), a_near)
        a_far = np.where(par, np.where(inside, np.inf, -np.inf), a_far)
        near = np.maximum(near, a_near)
        far = np.minimum(far, a_far)
    near = np.maximum(near, 0.0)
    hit = (far > near) & (far > 0.0)
    return near, far, hit


@dataclass
class SampleBatch:
    """Flat per-ray ordered samples plus CSR offsets into the ray batch.

    sigma / colors / features start empty and are filled by the model as the
    forward pass progresses.
    """

    rays: Rays
    positions: np.ndarray      # (S, 3)
    t_param: np.ndarray        # (S,) distance along the ray
    delta: np.ndarray          # (S,) segment lengths, > 0
    ray_index: np.ndarray      # (S,) int
    offsets: np.ndarray        # (R+1,) int
    t_near: np.ndarray         # (R,)
    t_far: np.ndarray          # (R,)
    hit: np.ndarray            # (R,) bool
    sigma: np.ndarray | None = None
    colors: np.ndarray | None = None
    f_den: np.ndarray | None = None
    f_tex: np.ndarray | None = None

    @property
    def num_samples(self) -> int:
        return self.positions.shape[0]

    @property
    def num_rays(self) -> int:
        return len(self.offsets) - 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)


def sample_points(rays: Rays, box: Aabb, step_size: float, *, rng=None) -> SampleBatch:
    """Uniform marching: samples at t_near + (k + jitter) * step, inside the box.

    jitter is one uniform draw per ray when rng is given, else 0.5
    (deterministic mode). Rays that miss the box contribute no samples.
    """
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    R = len(rays)
    tn, tf, hit = ray_aabb(rays.origins, rays.dirs, box)
    jit = rng.random(R) if rng is not None else np.full(R, 0.5)
    q = np.where(hit, (tf - tn) / step_size - jit, 0.0)
    counts = np.maximum(0, np.ceil(q)).astype(np.int64)
    offsets = np.zeros(R + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    S = int(offsets[-1])
    ridx = np.repeat(np.arange(R), counts)
    k = np.arange(S) - offsets[ridx]
    t_param = tn[ridx] + (k + jit[ridx]) * step_size
    delta = np.full(S, step_size)
    last = offsets[1:][counts > 0] - 1
    delta[last] = tf[ridx[last]] - t_param[last]
    pos = rays.origins[ridx] + t_param[:, None] * rays.dirs[ridx]
    np.clip(pos, box.min, box.max, out=pos)
    return SampleBatch(
        rays=rays,
        positions=pos,
        t_param=t_param,
        delta=delta,
        ray_index=ridx,
        offsets=offsets,
        t_near=tn,
        t_far=tf,
        hit=hit,
    )


@dataclass
class CompositeResult:
    rgb: np.ndarray        # (R, 3)
    depth: np.ndarray      # (R,)
    weights: np.ndarray    # (S,) flat alpha weights T_i * alpha_i
    residual: np.ndarray   # (R,) transmittance left after the last sample
    cache: "CompositeCache | None" = None


@dataclass
class CompositeCache:
    ray_index: np.ndarray
    slot: np.ndarray
    shape: tuple
    one_minus_alpha: np.ndarray  # dense (R, K)
    trans: np.ndarray            # dense T_i
    w_dense: np.ndarray
    c_dense: np.ndarray
    t_dense: np.ndarray
    delta_flat: np.ndarray
    weights_flat: np.ndarray
    residual: np.ndarray
    background: np.ndarray


def composite(batch: SampleBatch, background, *, dtype=np.float64, want_cache=False) -> CompositeResult:
    """Alpha-composite batch.sigma / batch.colors front to back per ray."""
    sigma = np.asarray(batch.sigma, dtype=dtype)
    colors = np.asarray(batch.colors, dtype=dtype)
    delta = np.asarray(batch.delta, dtype=dtype)
    bg = np.asarray(background, dtype=dtype).reshape(3)
    if sigma.size and sigma.min() < 0:
        raise ValueError("negative density fed to composite")
    if delta.size and delta.min() <= 0:
        raise ValueError("non-positive segment length fed to composite")

    R = batch.num_rays
    ridx = batch.ray_index
    slot = np.arange(batch.num_samples) - batch.offsets[ridx]
    K = int(batch.counts.max()) if R and batch.num_samples else 0
    shape = (R, max(K, 1))

    def dense(flat, fill=0.0):
        out = np.full(shape, fill, dtype=dtype)
        out[ridx, slot] = flat
        return out

    a_dense = dense(1.0 - np.exp(-sigma * delta))  # padding stays fully transparent
    om = 1.0 - a_dense
    cp = np.cumprod(om, axis=1)
    trans = np.concatenate([np.ones((R, 1), dtype=dtype), cp[:, :-1]], axis=1)
    residual = cp[:, -1] if batch.num_samples else np.ones(R, dtype=dtype)
    w_dense = trans * a_dense
    c_dense = np.zeros((*shape, 3), dtype=dtype)
    c_dense[ridx, slot] = colors
    t_dense = dense(batch.t_param.astype(dtype))

    rgb = np.einsum("rk,rkc->rc", w_dense, c_dense) + residual[:, None] * bg
    depth = (w_dense * t_dense).sum(axis=1)
    weights_flat = w_dense[ridx, slot]

    cache = None
    if want_cache:
        cache = CompositeCache(
            ray_index=ridx,
            slot=slot,
            shape=shape,
            one_minus_alpha=om,
            trans=trans,
            w_dense=w_dense,
            c_dense=c_dense,
            t_dense=t_dense,
            delta_flat=delta,
            weights_flat=weights_flat,
            residual=residual,
            background=bg,
        )
    return CompositeResult(rgb=rgb, depth=depth, weights=weights_flat, residual=residual, cache=cache)


def composite_backward(
    cache: CompositeCache,
    d_rgb=None,
    d_depth=None,
    d_residual=None,
    d_weights=None,
    *,
    dtype=np.float64,
):
    """Chain pixel-level cotangents to per-sample (d_sigma, d_colors).

    d_rgb: (R,3), d_depth: (R,), d_residual: (R,), d_weights: flat (S,)
    extra cotangent on the alpha weights themselves (the per-point color
    loss uses it). Any of them may be None.
    """
    R, K = cache.shape
    ridx, slot = cache.ray_index, cache.slot
    zeros_r = np.zeros(R, dtype=dtype)
    d_rgb = zeros_r[:, None] + (0.0 if d_rgb is None else np.asarray(d_rgb, dtype=dtype))
    d_depth = zeros_r + (0.0 if d_depth is None else np.asarray(d_depth, dtype=dtype))
    g_res = zeros_r + (0.0 if d_residual is None else np.asarray(d_residual, dtype=dtype))
    g_res = g_res + d_rgb @ cache.background

    # total cotangent on each dense weight
    G = np.einsum("rc,rkc->rk", d_rgb, cache.c_dense) + d_depth[:, None] * cache.t_dense
    if d_weights is not None:
        gw = np.zeros((R, K), dtype=dtype)
        gw[ridx, slot] = np.asarray(d_weights, dtype=dtype)
        G = G + gw

    Gw = G * cache.w_dense
    # suffix_i = sum_{j>i} G_j w_j + g_res * T_res
    suffix = np.zeros((R, K), dtype=dtype)
    if K > 1:
        suffix[:, :-1] = np.cumsum(Gw[:, ::-1], axis=1)[:, ::-1][:, 1:]
    suffix += (g_res * cache.residual)[:, None]

    d_alpha = G * cache.trans - suffix / (cache.one_minus_alpha + 1e-10)
    d_sigma_dense = d_alpha * cache.one_minus_alpha  # * exp(-sigma*delta)
    d_sigma = d_sigma_dense[ridx, slot] * cache.delta_flat
    d_colors = cache.weights_flat[:, None] * d_rgb[ridx]
    return d_sigma, d_colors


def expected_depth(result: CompositeResult) -> np.ndarray:
    """Alpha-weighted mean ray distance (already accumulated by composite)."""
    return result.depth


def surface_points(rays: Rays, depth: np.ndarray) -> np.ndarray:
    """Pseudo-surface points origin + depth * direction, one per ray."""
    return rays.origins + np.asarray(depth)[:, None] * rays.dirs
