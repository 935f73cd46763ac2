"""Fourier positional encoding and the time-conditioned (phase-shifted) variant.

Plain encoding lifts each input component p to sin/cos pairs at frequencies
2^l * pi for l = 0..L-1. The conditional variant shifts the phase of band l
by phi_l * t with phi_l = 2*pi / (2^l * pi) = 2^(1-l), so the embedding of a
feature drifts with the time index while reducing exactly to the plain
encoding at t = 0.

Output layout is component-major: for each input component, the raw value
(when include_input is set) followed by (sin, cos) pairs in ascending band
order. Output width is dim * (2L + include_input).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EncodingConfig:
    """Frequency order and flags for one encoded input group."""

    L: int = 5
    include_input: bool = True
    conditional: bool = False
    # if False, every band uses the top band's phase coefficient 2^(2-L)
    per_frequency_phase: bool = True

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"frequency order L must be >= 1, got {self.L}")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.L + (1 if self.include_input else 0))

    def frequencies(self, dtype=np.float64) -> np.ndarray:
        return (2.0 ** np.arange(self.L, dtype=dtype)) * dtype(np.pi)

    def phase_coefficients(self, dtype=np.float64) -> np.ndarray:
        """phi_l = 2*pi / (2^l * pi), or the top-band constant when configured."""
        ls = np.arange(self.L, dtype=dtype)
        if not self.per_frequency_phase:
            ls = np.full(self.L, self.L - 1, dtype=dtype)
        return 2.0 ** (1.0 - ls)


@dataclass
class EncodingCache:
    sin: np.ndarray        # (S, D, L)
    cos: np.ndarray        # (S, D, L)
    freqs: np.ndarray      # (L,)
    include_input: bool


def _assemble(v, sin, cos, include_input, dtype):
    S, D, L = sin.shape
    width = 2 * L + (1 if include_input else 0)
    out = np.empty((S, D, width), dtype=dtype)
    if include_input:
        out[:, :, 0] = v
    pairs = out[:, :, width - 2 * L :].reshape(S, D, L, 2)
    pairs[:, :, :, 0] = sin
    pairs[:, :, :, 1] = cos
    return out.reshape(S, D * width)


def positional_encode(
    v: np.ndarray,
    cfg: EncodingConfig,
    *,
    dtype=np.float64,
    want_cache: bool = False,
):
    """Encode (S, D) inputs to (S, D*(2L+include_input)) Fourier features."""
    v = np.atleast_2d(np.asarray(v, dtype=dtype))
    if not np.all(np.isfinite(v)):
        raise ValueError("positional_encode requires finite input")
    freqs = cfg.frequencies(dtype)
    args = v[:, :, None] * freqs[None, None, :]
    s, c = np.sin(args), np.cos(args)
    out = _assemble(v, s, c, cfg.include_input, dtype)
    if not want_cache:
        return out
    return out, EncodingCache(sin=s, cos=c, freqs=freqs, include_input=cfg.include_input)


def conditional_positional_encode(
    v: np.ndarray,
    t: np.ndarray,
    cfg: EncodingConfig,
    *,
    dtype=np.float64,
    want_cache: bool = False,
):
    """Encode with a per-band phase shift phi_l * t; equals the plain encoding at t=0.

    t is one time index in [0, 1] per row of v.
    """
    v = np.atleast_2d(np.asarray(v, dtype=dtype))
    t = np.asarray(t, dtype=dtype).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("conditional_positional_encode requires finite input")
    if t.shape[0] != v.shape[0]:
        raise ValueError(f"t has {t.shape[0]} rows, v has {v.shape[0]}")
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError(f"time index must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    freqs = cfg.frequencies(dtype)
    phase = cfg.phase_coefficients(dtype)
    args = v[:, :, None] * freqs[None, None, :] + phase[None, None, :] * t[:, None, None]
    s, c = np.sin(args), np.cos(args)
    out = _assemble(v, s, c, cfg.include_input, dtype)
    if not want_cache:
        return out
    return out, EncodingCache(sin=s, cos=c, freqs=freqs, include_input=cfg.include_input)


def encode_backward(cache: EncodingCache, upstream: np.ndarray, dtype=np.float64):
    """Chain (S, out_dim) cotangents back to the (S, D) encoder input.

    Works for both encoders: the phase shift is constant in v, so the input
    jacobian only involves the cached sin/cos values and the band frequencies.
    """
    S, D, L = cache.sin.shape
    width = 2 * L + (1 if cache.include_input else 0)
    up = np.asarray(upstream, dtype=dtype).reshape(S, D, width)
    pairs = up[:, :, width - 2 * L :].reshape(S, D, L, 2)
    f = cache.freqs[None, None, :]
    grad = ((pairs[:, :, :, 0] * cache.cos - pairs[:, :, :, 1] * cache.sin) * f).sum(axis=2)
    if cache.include_input:
        grad = grad + up[:, :, 0]
    return grad
