"""Density and texture field networks with manual forward/backward passes.

A field maps (position, time, sampled grid features, and for texture the view
direction) to volume density or RGB color. Three architecture variants share
the same call signatures:

* ``dual``: separate feature volume and MLP per field (the default).
* ``sv``: one shared feature volume, still two MLPs.
* ``sf``: one shared volume and a shared trunk MLP with two output heads.

Density is always view-independent and passes through a shifted softplus so a
zero-initialized feature volume starts transparent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import (
    EncodingCache,
    EncodingConfig,
    conditional_positional_encode,
    encode_backward,
    positional_encode,
)

DENSITY_RAW_SHIFT = -5.0  # pre-activation offset keeping the initial field transparent


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Mlp:
    """Affine+ReLU chain with an output activation tag.

    Weights are (fan_in, fan_out) float32; compute happens in the caller's
    dtype. out_activation is one of 'linear', 'relu', 'sigmoid',
    'shifted_softplus' (softplus of pre-activation + out_shift).
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    out_activation: str = "linear"
    out_shift: float = 0.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: bias {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: fan-in {w.shape[0]} breaks the chain")
        if self.out_activation not in ("linear", "relu", "sigmoid", "shifted_softplus"):
            raise ValueError(f"unknown output activation {self.out_activation!r}")

    @property
    def widths(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def named_parameters(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"W{i}", w
            yield f"b{i}", b


def init_mlp(
    widths,
    seed,
    *,
    out_activation: str = "linear",
    out_shift: float = 0.0,
    head_scale: float = 1.0,
    head_bias=None,
) -> Mlp:
    """He fan-in init for hidden layers; the head layer gets head_scale / head_bias.

    head_scale=0 zeroes the final weights so the output equals head_bias
    exactly, which the LUT blend-weight net relies on.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"need at least [in, out] positive widths, got {widths}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    n = len(widths) - 1
    for i in range(n):
        fan_in, fan_out = widths[i], widths[i + 1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        if i == n - 1:
            w *= head_scale
        weights.append(w.astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    if head_bias is not None:
        biases[-1] = np.asarray(head_bias, dtype=np.float32).copy()
        if biases[-1].shape != (widths[-1],):
            raise ValueError("head_bias shape does not match the output width")
    return Mlp(weights=weights, biases=biases, out_activation=out_activation, out_shift=out_shift)


@dataclass
class MlpCache:
    inputs: list          # layer inputs a_0 .. a_{n-1}
    pre_acts: list        # pre-activations z_1 .. z_n
    output: np.ndarray


def mlp_forward(mlp: Mlp, x: np.ndarray, *, dtype=np.float64, want_cache: bool = False):
    x = np.asarray(x, dtype=dtype)
    if x.shape[1] != mlp.weights[0].shape[0]:
        raise ValueError(f"input width {x.shape[1]} != layer 0 fan-in {mlp.weights[0].shape[0]}")
    inputs, pre_acts = [x], []
    n = len(mlp.weights)
    a = x
    for i in range(n):
        z = a @ mlp.weights[i].astype(dtype, copy=False) + mlp.biases[i].astype(dtype, copy=False)
        pre_acts.append(z)
        if i < n - 1:
            a = np.maximum(z, 0.0)
            inputs.append(a)
    z = pre_acts[-1]
    if mlp.out_activation == "linear":
        y = z
    elif mlp.out_activation == "relu":
        y = np.maximum(z, 0.0)
    elif mlp.out_activation == "sigmoid":
        y = sigmoid(z)
    else:  # shifted_softplus
        y = softplus(z + mlp.out_shift)
    if not want_cache:
        return y
    return y, MlpCache(inputs=inputs, pre_acts=pre_acts, output=y)


def mlp_backward(mlp: Mlp, cache: MlpCache, upstream: np.ndarray, *, dtype=np.float64):
    """Reverse-mode through the chain. Returns (weight grads, bias grads, input grad)."""
    up = np.asarray(upstream, dtype=dtype)
    if up.shape != cache.pre_acts[-1].shape:
        raise ValueError(
            f"upstream shape {up.shape} does not match cached output "
            f"{cache.pre_acts[-1].shape}; stale cache?"
        )
    z = cache.pre_acts[-1]
    if mlp.out_activation == "linear":
        dz = up
    elif mlp.out_activation == "relu":
        dz = up * (z > 0)
    elif mlp.out_activation == "sigmoid":
        y = cache.output
        dz = up * y * (1.0 - y)
    else:
        dz = up * sigmoid(z + mlp.out_shift)
    dws, dbs = [None] * len(mlp.weights), [None] * len(mlp.weights)
    for i in range(len(mlp.weights) - 1, -1, -1):
        a = cache.inputs[i]
        dws[i] = a.T @ dz
        dbs[i] = dz.sum(axis=0)
        dx = dz @ mlp.weights[i].astype(dtype, copy=False).T
        if i > 0:
            dz = dx * (cache.pre_acts[i - 1] > 0)
    return dws, dbs, dx


@dataclass
class FieldConfig:
    """Architecture variant, widths, and the per-input-group encoders."""

    variant: str = "dual"  # dual | sv | sf
    hidden_width: int = 128
    num_layers: int = 5    # weight layers per field MLP (trunk+head for sf)
    freq_order: int = 5
    density_feature_encoding: str = "pe"    # none | pe
    texture_feature_encoding: str = "cpe"   # none | pe | cpe
    raw_time_input: bool = True
    per_frequency_phase: bool = True

    def __post_init__(self):
        if self.variant not in ("dual", "sv", "sf"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.density_feature_encoding not in ("none", "pe"):
            raise ValueError(f"bad density_feature_encoding {self.density_feature_encoding!r}")
        if self.texture_feature_encoding not in ("none", "pe", "cpe"):
            raise ValueError(f"bad texture_feature_encoding {self.texture_feature_encoding!r}")

    def enc(self, conditional: bool = False) -> EncodingConfig:
        return EncodingConfig(
            L=self.freq_order,
            include_input=True,
            conditional=conditional,
            per_frequency_phase=self.per_frequency_phase,
        )

    def scalar_enc_dim(self) -> int:
        return self.enc().out_dim(1)

    def time_dim(self) -> int:
        return self.scalar_enc_dim() + (1 if self.raw_time_input else 0)

    def density_in_dim(self, feature_channels: int) -> int:
        d = self.enc().out_dim(3) + self.time_dim()
        if self.density_feature_encoding == "pe":
            d += self.enc().out_dim(feature_channels)
        else:
            d += feature_channels
        return d

    def texture_in_dim(self, feature_channels: int) -> int:
        d = self.enc().out_dim(3) + self.time_dim() + self.enc().out_dim(3)
        if self.texture_feature_encoding == "none":
            d += feature_channels
        else:
            d += self.enc().out_dim(feature_channels)
        return d


@dataclass
class FieldParams:
    """The MLPs owned by one model, keyed by variant."""

    variant: str
    density_mlp: Mlp | None = None
    texture_mlp: Mlp | None = None
    trunk_mlp: Mlp | None = None
    sigma_head: Mlp | None = None
    rgb_head: Mlp | None = None

    def named_mlps(self):
        for name in ("density_mlp", "texture_mlp", "trunk_mlp", "sigma_head", "rgb_head"):
            mlp = getattr(self, name)
            if mlp is not None:
                yield name, mlp


def init_field_params(fc: FieldConfig, feature_channels: int, seed) -> FieldParams:
    """Build the variant's MLPs deterministically from one seed."""
    rng = np.random.default_rng(seed)
    w = fc.hidden_width
    ch = feature_channels
    if fc.variant in ("dual", "sv"):
        den_widths = [fc.density_in_dim(ch)] + [w] * (fc.num_layers - 1) + [1]
        tex_widths = [fc.texture_in_dim(ch)] + [w] * (fc.num_layers - 1) + [3]
        return FieldParams(
            variant=fc.variant,
            density_mlp=init_mlp(
                den_widths,
                rng.integers(2**32),
                out_activation="shifted_softplus",
                out_shift=DENSITY_RAW_SHIFT,
                head_scale=1e-2,
            ),
            texture_mlp=init_mlp(tex_widths, rng.integers(2**32), out_activation="sigmoid"),
        )
    trunk_in = fc.density_in_dim(ch)
    trunk_widths = [trunk_in] + [w] * (fc.num_layers - 1)
    return FieldParams(
        variant="sf",
        trunk_mlp=init_mlp(trunk_widths, rng.integers(2**32), out_activation="relu"),
        sigma_head=init_mlp(
            [w, 1],
            rng.integers(2**32),
            out_activation="shifted_softplus",
            out_shift=DENSITY_RAW_SHIFT,
            head_scale=1e-2,
        ),
        rgb_head=init_mlp([w + fc.enc().out_dim(3), 3], rng.integers(2**32), out_activation="sigmoid"),
    )


# ---------------------------------------------------------------------------
# input assembly


@dataclass
class _GroupCache:
    """Where each encoded group sits in the stacked input + feature enc cache."""

    feat_slice: slice
    feat_cache: EncodingCache | None  # None when features enter raw
    in_width: int


def _encode_time(t, fc: FieldConfig, dtype):
    cols = [positional_encode(t[:, None], fc.enc(), dtype=dtype)]
    if fc.raw_time_input:
        cols.append(t[:, None].astype(dtype))
    return np.concatenate(cols, axis=1)


def _assemble_density_input(pos_n, t, f_den, fc: FieldConfig, dtype):
    blocks = [
        positional_encode(pos_n, fc.enc(), dtype=dtype),
        _encode_time(t, fc, dtype),
    ]
    start = blocks[0].shape[1] + blocks[1].shape[1]
    if fc.density_feature_encoding == "pe":
        ef, fcache = positional_encode(f_den, fc.enc(), dtype=dtype, want_cache=True)
    else:
        ef, fcache = np.asarray(f_den, dtype=dtype), None
    blocks.append(ef)
    x = np.concatenate(blocks, axis=1)
    return x, _GroupCache(slice(start, start + ef.shape[1]), fcache, x.shape[1])


def _assemble_texture_input(pos_n, t, dirs, f_tex, fc: FieldConfig, dtype):
    blocks = [
        positional_encode(pos_n, fc.enc(), dtype=dtype),
        _encode_time(t, fc, dtype),
        positional_encode(dirs, fc.enc(), dtype=dtype),
    ]
    start = sum(b.shape[1] for b in blocks)
    mode = fc.texture_feature_encoding
    if mode == "cpe":
        ef, fcache = conditional_positional_encode(f_tex, t, fc.enc(conditional=True), dtype=dtype, want_cache=True)
    elif mode == "pe":
        ef, fcache = positional_encode(f_tex, fc.enc(), dtype=dtype, want_cache=True)
    else:
        ef, fcache = np.asarray(f_tex, dtype=dtype), None
    blocks.append(ef)
    x = np.concatenate(blocks, axis=1)
    return x, _GroupCache(slice(start, start + ef.shape[1]), fcache, x.shape[1])


def _feature_grad(group: _GroupCache, dx, feature_channels, dtype):
    dfeat = dx[:, group.feat_slice]
    if group.feat_cache is None:
        return dfeat
    return encode_backward(group.feat_cache, dfeat, dtype=dtype)


# ---------------------------------------------------------------------------
# dual / sv field evaluation


@dataclass
class DensityCache:
    group: _GroupCache
    mlp_cache: MlpCache


def density_field(pos_n, t, f_den, mlp: Mlp, fc: FieldConfig, *, dtype=np.float64, want_cache=False):
    """sigma(position, time, density feature); never sees the view direction."""
    x, group = _assemble_density_input(pos_n, t, f_den, fc, dtype)
    out = mlp_forward(mlp, x, dtype=dtype, want_cache=want_cache)
    if not want_cache:
        return out[:, 0]
    y, mc = out
    return y[:, 0], DensityCache(group=group, mlp_cache=mc)


def density_field_backward(mlp: Mlp, cache: DensityCache, d_sigma, feature_channels, *, dtype=np.float64):
    dws, dbs, dx = mlp_backward(mlp, cache.mlp_cache, np.asarray(d_sigma, dtype=dtype)[:, None], dtype=dtype)
    return dws, dbs, _feature_grad(cache.group, dx, feature_channels, dtype)


@dataclass
class TextureCache:
    group: _GroupCache
    mlp_cache: MlpCache


def texture_field(pos_n, t, dirs, f_tex, mlp: Mlp, fc: FieldConfig, *, dtype=np.float64, want_cache=False):
    """RGB in (0,1)^3 from position, time, view direction, and texture feature."""
    x, group = _assemble_texture_input(pos_n, t, dirs, f_tex, fc, dtype)
    out = mlp_forward(mlp, x, dtype=dtype, want_cache=want_cache)
    if not want_cache:
        return out
    y, mc = out
    return y, TextureCache(group=group, mlp_cache=mc)


def texture_field_backward(mlp: Mlp, cache: TextureCache, d_rgb, feature_channels, *, dtype=np.float64):
    dws, dbs, dx = mlp_backward(mlp, cache.mlp_cache, d_rgb, dtype=dtype)
    return dws, dbs, _feature_grad(cache.group, dx, feature_channels, dtype)
