"""Pixel-level color refinement through a bank of 3D lookup tables.

A bank holds M color cubes over RGB space (each a VoxelGrid with bbox
[0,1]^3) plus a deep MLP that predicts per-pixel blend weights from the
pseudo-surface point of the ray. The blended lookup is applied recurrently Z
times with a clamp between passes:

    rgb <- clamp(sum_m w_m * lookup(LUT_m, rgb), 0, 1)

Weights are computed once per pixel and reused across the Z passes. At
initialization LUT 0 is the identity cube, the rest are zero, and the weight
net outputs exactly (1, 0, ..., 0), so refinement starts as the identity map
and switching it on mid-training leaves the loss unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import EncodingConfig, encode_backward, positional_encode
from .fields import Mlp, MlpCache, init_mlp, mlp_backward, mlp_forward
from .grid import (
    Aabb,
    TrilinearCache,
    VoxelGrid,
    trilinear_adjoint_from_cache,
    trilinear_point_gradient,
    trilinear_sample,
)


@dataclass
class LutBank:
    luts: list                 # M VoxelGrids, 3 channels each, bbox [0,1]^3
    weight_mlp: Mlp
    recurrence: int = 3
    softmax_weights: bool = False
    enc: EncodingConfig = field(default_factory=EncodingConfig)

    def __post_init__(self):
        if len(self.luts) < 1:
            raise ValueError("a LUT bank needs at least one table")
        if self.recurrence < 1:
            raise ValueError("recurrence count must be >= 1")
        for m, lut in enumerate(self.luts):
            if lut.channels != 3:
                raise ValueError(f"LUT {m} must have 3 channels, got {lut.channels}")

    @property
    def num_luts(self) -> int:
        return len(self.luts)

    def named_parameters(self):
        for m, lut in enumerate(self.luts):
            yield f"lut{m}", lut.data
        for name, arr in self.weight_mlp.named_parameters():
            yield f"weight_mlp.{name}", arr


def identity_lut(size: int = 33) -> VoxelGrid:
    """Color cube whose lattice stores its own coordinates."""
    axis = np.linspace(0.0, 1.0, size, dtype=np.float32)
    r, g, b = np.meshgrid(axis, axis, axis, indexing="ij")
    data = np.stack([r, g, b], axis=-1)
    return VoxelGrid(dims=(size, size, size), channels=3, bbox=Aabb([0, 0, 0], [1, 1, 1]), data=data)


def init_lut_bank(
    num_luts: int,
    seed,
    *,
    size: int = 33,
    recurrence: int = 3,
    hidden_width: int = 128,
    num_layers: int = 10,
    freq_order: int = 5,
    softmax_weights: bool = False,
) -> LutBank:
    """Identity table first, zero tables after, weight net pinned to (1,0,...,0)."""
    if num_luts < 1:
        raise ValueError("num_luts must be >= 1")
    luts = [identity_lut(size)]
    box = Aabb([0, 0, 0], [1, 1, 1])
    for _ in range(num_luts - 1):
        luts.append(VoxelGrid(dims=(size, size, size), channels=3, bbox=box))
    enc = EncodingConfig(L=freq_order, include_input=True)
    head_bias = np.zeros(num_luts, dtype=np.float32)
    head_bias[0] = 1.0
    widths = [enc.out_dim(3)] + [hidden_width] * (num_layers - 1) + [num_luts]
    mlp = init_mlp(widths, seed, head_scale=0.0, head_bias=head_bias)
    return LutBank(
        luts=luts,
        weight_mlp=mlp,
        recurrence=recurrence,
        softmax_weights=softmax_weights,
        enc=enc,
    )


def lut_lookup(lut: VoxelGrid, rgb: np.ndarray, *, dtype=np.float64, want_cache=False):
    """Trilinear lookup in color space; inputs are clamped to [0,1]^3 first."""
    rgb = np.asarray(rgb, dtype=dtype)
    clamped = np.clip(rgb, 0.0, 1.0)
    out = trilinear_sample(lut, clamped, dtype=dtype, want_cache=want_cache, want_point_grad=want_cache)
    if not want_cache:
        return out
    values, cache = out
    mask = (rgb >= 0.0) & (rgb <= 1.0)  # clamp passes gradient only where it was a no-op
    return values, cache, mask


@dataclass
class WeightCache:
    enc_cache: object
    mlp_cache: MlpCache
    weights: np.ndarray
    raw: np.ndarray
    bad: np.ndarray  # rays forced to the identity blend


def predict_weights(surface: np.ndarray, bank: LutBank, *, dtype=np.float64, want_cache=False):
    """Blend weights from the pseudo-surface point, one M-vector per pixel.

    Rays with a non-finite surface point fall back to the pure-identity blend
    and receive no gradient.
    """
    surface = np.atleast_2d(np.asarray(surface, dtype=dtype))
    bad = ~np.all(np.isfinite(surface), axis=1)
    safe = np.where(bad[:, None], 0.0, surface)
    encoded, ecache = positional_encode(safe, bank.enc, dtype=dtype, want_cache=True)
    raw, mcache = mlp_forward(bank.weight_mlp, encoded, dtype=dtype, want_cache=True)
    if bank.softmax_weights:
        ex = np.exp(raw - raw.max(axis=1, keepdims=True))
        w = ex / ex.sum(axis=1, keepdims=True)
    else:
        w = raw
    if bad.any():
        w = w.copy()
        w[bad] = 0.0
        w[bad, 0] = 1.0
    if not want_cache:
        return w
    return w, WeightCache(enc_cache=ecache, mlp_cache=mcache, weights=w, raw=raw, bad=bad)


def predict_weights_backward(bank: LutBank, cache: WeightCache, d_weights, *, dtype=np.float64):
    """Returns (weight-MLP grads, d_surface)."""
    dw = np.array(d_weights, dtype=dtype)
    dw[cache.bad] = 0.0
    if bank.softmax_weights:
        w = cache.weights
        dw = (dw - (dw * w).sum(axis=1, keepdims=True)) * w
    dws, dbs, d_enc = mlp_backward(bank.weight_mlp, cache.mlp_cache, dw, dtype=dtype)
    d_surface = encode_backward(cache.enc_cache, d_enc, dtype=dtype)
    d_surface[cache.bad] = 0.0
    return (dws, dbs), d_surface


@dataclass
class RefineCache:
    wcache: WeightCache
    steps: list  # per z: (lookup caches, lookup values (R,M,3), clamp mask or None)
    num_pixels: int


def refine(coarse_rgb: np.ndarray, surface: np.ndarray, bank: LutBank, *, dtype=np.float64, want_cache=False):
    """Apply the weighted LUT blend Z times; weights come from the surface point."""
    x = np.asarray(coarse_rgb, dtype=dtype)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"coarse rgb must be (R, 3), got {x.shape}")
    if np.asarray(surface).shape != x.shape:
        raise ValueError("surface points must match the pixel batch")
    w, wcache = predict_weights(surface, bank, dtype=dtype, want_cache=True)
    steps = []
    for _ in range(bank.recurrence):
        caches, values = [], np.empty((x.shape[0], bank.num_luts, 3), dtype=dtype)
        for m, lut in enumerate(bank.luts):
            values[:, m], c, mask = lut_lookup(lut, x, dtype=dtype, want_cache=True)
            caches.append((c, mask))
        y = np.einsum("rm,rmc->rc", w, values)
        clamp_mask = (y >= 0.0) & (y <= 1.0)
        x = np.clip(y, 0.0, 1.0)
        steps.append((caches, values, clamp_mask))
    if not want_cache:
        return x
    return x, RefineCache(wcache=wcache, steps=steps, num_pixels=x.shape[0])


def refine_backward(bank: LutBank, cache: RefineCache, d_out, *, dtype=np.float64):
    """Chain refined-pixel cotangents to every input of the module.

    Returns (d_coarse, per-LUT data grads, weight-MLP grads, d_surface).
    """
    gx = np.asarray(d_out, dtype=dtype)
    d_w = np.zeros((cache.num_pixels, bank.num_luts), dtype=dtype)
    d_lut = [np.zeros(lut.data.shape, dtype=dtype) for lut in bank.luts]
    w = cache.wcache.weights
    for caches, values, clamp_mask in reversed(cache.steps):
        gy = gx * clamp_mask
        d_w += np.einsum("rc,rmc->rm", gy, values)
        gx = np.zeros_like(gy)
        for m, (tcache, in_mask) in enumerate(caches):
            up = w[:, m : m + 1] * gy
            d_lut[m] += trilinear_adjoint_from_cache(tcache, up, dtype=dtype)
            gx += trilinear_point_gradient(tcache, up, dtype=dtype) * in_mask
    mlp_grads, d_surface = predict_weights_backward(bank, cache.wcache, d_w, dtype=dtype)
    return gx, d_lut, mlp_grads, d_surface


def export_cube(lut: VoxelGrid, path, *, title: str = "v4d lut"):
    """Write one table as a .cube text file (red axis fastest)."""
    size = lut.dims[0]
    data = lut.data
    with open(path, "w") as fh:
        fh.write(f"TITLE \"{title}\"\n")
        fh.write(f"LUT_3D_SIZE {size}\n")
        fh.write("DOMAIN_MIN 0.0 0.0 0.0\nDOMAIN_MAX 1.0 1.0 1.0\n")
        for iz in range(lut.dims[2]):
            for iy in range(lut.dims[1]):
                for ix in range(lut.dims[0]):
                    r, g, b = data[ix, iy, iz]
                    fh.write(f"{r:.6f} {g:.6f} {b:.6f}\n")
