"""Toy-scale style-based synthesis stack built from Hydra-NA layers.

Pipeline: a latent ``z`` is pixel-normalized and mapped by an MLP to a style
``w``. Synthesis starts from a learned ``4x4`` constant; each resolution
level runs two pre-norm attention blocks (``x + attn(modulate(x, w))``),
dense multi-head attention at ``4x4`` and Hydra-NA above, and adds a
per-level RGB projection into a bilinearly upsampled running image.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import hydra as hy
from .exceptions import ConfigError, DimensionError, InvalidPlanError
from .hydra import PartitionPlan, partition_heads
from .neighborhood import NeighborhoodSpec
from .tensor import leaky_relu, linear, make_rng, trunc_normal_fill, upsample_bilinear_2x
from .validation import check_dtype, check_tensor

__all__ = [
    "DEFAULT_CHANNELS",
    "DEFAULT_HEADS",
    "GeneratorConfig",
    "fit_kernel",
    "build_config_2split",
    "build_config_pyramid",
    "config_from_dict",
    "init_generator_params",
    "mapping_forward",
    "layer_norm",
    "modulate",
    "synthesis_forward",
    "count_generator_params",
    "count_generator_macs",
    "sample_latents",
]

DEFAULT_CHANNELS = {4: 128, 8: 128, 16: 64, 32: 64, 64: 32}
DEFAULT_HEADS = {4: 4, 8: 4, 16: 4, 32: 4, 64: 4}
PYRAMID_HEADS = 8
LATENT_DIM = 512
MAX_KERNEL = 7


@dataclass
class GeneratorConfig:
    target: int
    design: str
    channels: dict
    heads: dict
    plans: dict
    latent_dim: int = LATENT_DIM
    mapping_layers: int = 8
    min_heads: int = 1
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def resolutions(self):
        return [4 * 2 ** i for i in range(int(math.log2(self.target)) - 1)]

    def to_dict(self):
        return {
            "target": self.target,
            "design": self.design,
            "channels": {str(k): v for k, v in self.channels.items()},
            "heads": {str(k): v for k, v in self.heads.items()},
            "min_heads": self.min_heads,
            "seed": self.seed,
            "latent_dim": self.latent_dim,
            "mapping_layers": self.mapping_layers,
            **self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def describe(self):
        """One row per level: ``(level, kernels, dilations, dilated sizes)``; level 4 rows are empty."""
        rows = []
        for level in self.resolutions:
            plan = self.plans.get(level)
            if plan is None:
                rows.append((level, [], [], []))
            else:
                rows.append((level, [s.kernel for s in plan.specs], [s.dilation for s in plan.specs],
                             [s.dilated_size for s in plan.specs]))
        return rows


def _check_target(target):
    if not isinstance(target, (int, np.integer)) or target < 8 or target > 1024 or target & (target - 1):
        raise ConfigError(f"target resolution must be a power of two in [8, 1024], got {target!r}")
    return int(target)


def fit_kernel(level, dilation, preferred=MAX_KERNEL):
    """Largest odd kernel no bigger than ``preferred`` whose dilated size fits ``level``."""
    k = min(preferred, level // dilation)
    if k % 2 == 0:
        k -= 1
    if k < 1:
        raise ConfigError(f"no odd kernel fits level {level} at dilation {dilation}")
    return k


def _level_table(table, defaults, levels, fallback):
    table = {int(k): int(v) for k, v in (table or {}).items()}
    out = {}
    for level in levels:
        if level in table:
            out[level] = table[level]
        else:
            out[level] = defaults.get(level, fallback)
    return out


def _make_plan(level, heads, dilations):
    if len(dilations) > heads:
        raise InvalidPlanError(f"level {level}: {len(dilations)} partitions need at least as many heads, got {heads}")
    counts = partition_heads(heads, len(dilations))
    return PartitionPlan(heads, tuple((h, NeighborhoodSpec(fit_kernel(level, d), d)) for h, d in zip(counts, dilations)))


def _build(target, design, dilations_for, channels, heads, min_heads, seed, latent_dim,
           mapping_layers, default_heads):
    target = _check_target(target)
    levels = [4 * 2 ** i for i in range(int(math.log2(target)) - 1)]
    channels = _level_table(channels, DEFAULT_CHANNELS, levels, DEFAULT_CHANNELS[64])
    heads = _level_table(heads, default_heads, levels, default_heads.get(64, DEFAULT_HEADS[64]))
    heads = {lvl: max(h, int(min_heads)) for lvl, h in heads.items()}
    for lvl in levels:
        if channels[lvl] % heads[lvl]:
            raise ConfigError(f"level {lvl}: {channels[lvl]} channels not divisible by {heads[lvl]} heads")
    plans = {lvl: _make_plan(lvl, heads[lvl], dilations_for(lvl)) for lvl in levels if lvl > 4}
    return GeneratorConfig(target, design, channels, heads, plans, int(latent_dim), int(mapping_layers),
                           int(min_heads), int(seed))


def build_config_2split(target, channels=None, heads=None, min_heads=1, seed=0,
                        latent_dim=LATENT_DIM, mapping_layers=8):
    """Two equal partitions per level: plain NA and NA dilated by ``level / 8``."""
    return _build(target, "2split", lambda lvl: [1, lvl // 8], channels, heads, min_heads, seed,
                  latent_dim, mapping_layers, DEFAULT_HEADS)


def build_config_pyramid(target, num_splits_by_level=None, channels=None, heads=None, min_heads=1,
                         seed=0, latent_dim=LATENT_DIM, mapping_layers=8):
    """Dilations ``1, 2, 4, ...`` up to ``level / 8``, optionally capped per level."""
    caps = {int(k): int(v) for k, v in (num_splits_by_level or {}).items()}

    def dilations(lvl):
        ds = [2 ** i for i in range(int(math.log2(lvl // 8)) + 1)]
        return ds[: caps[lvl]] if lvl in caps else ds

    default_heads = {4: DEFAULT_HEADS[4], **{2 ** i: PYRAMID_HEADS for i in range(3, 11)}}
    return _build(target, "pyramid", dilations, channels, heads, min_heads, seed, latent_dim,
                  mapping_layers, default_heads)


def config_from_dict(doc):
    """Inverse of :meth:`GeneratorConfig.to_dict`; missing level entries take defaults."""
    try:
        design = doc.get("design", "2split")
        kwargs = dict(
            channels=doc.get("channels"), heads=doc.get("heads"), min_heads=doc.get("min_heads", 1),
            seed=doc.get("seed", 0), latent_dim=doc.get("latent_dim", LATENT_DIM),
            mapping_layers=doc.get("mapping_layers", 8),
        )
        target = doc["target"]
    except (KeyError, AttributeError) as exc:
        raise ConfigError(f"malformed generator config: {exc}") from None
    if design == "2split":
        return build_config_2split(target, **kwargs)
    if design == "pyramid":
        return build_config_pyramid(target, doc.get("num_splits_by_level"), **kwargs)
    raise ConfigError(f"unknown design {design!r}; expected '2split' or 'pyramid'")


# --- parameters -------------------------------------------------------------------

def _param_shapes(cfg):
    """Ordered ``name -> shape`` for every generator parameter."""
    latent = cfg.latent_dim
    shapes = {}
    for i in range(cfg.mapping_layers):
        shapes[f"mapping.{i}.weight"] = (latent, latent)
        shapes[f"mapping.{i}.bias"] = (latent,)
    c4 = cfg.channels[4]
    shapes["const"] = (c4, 4, 4)
    prev = None
    for level in cfg.resolutions:
        c = cfg.channels[level]
        if prev is not None and prev != c:
            shapes[f"level{level}.inproj.weight"] = (c, prev)
            shapes[f"level{level}.inproj.bias"] = (c,)
        for layer in (1, 2):
            pre = f"level{level}.layer{layer}"
            for part in ("style_scale", "style_shift"):
                shapes[f"{pre}.{part}.weight"] = (c, latent)
                shapes[f"{pre}.{part}.bias"] = (c,)
            if level == 4:
                shapes[f"{pre}.pos"] = (4, 4, c)
            shapes[f"{pre}.attn.qkv.weight"] = (3 * c, c)
            shapes[f"{pre}.attn.qkv.bias"] = (3 * c,)
            if level > 4:
                for i, (h, s) in enumerate(cfg.plans[level].partitions):
                    shapes[f"{pre}.attn.rpb.{i}"] = (h, 2 * s.kernel - 1, 2 * s.kernel - 1)
            shapes[f"{pre}.attn.proj.weight"] = (c, c)
            shapes[f"{pre}.attn.proj.bias"] = (c,)
        shapes[f"level{level}.torgb.weight"] = (3, c)
        shapes[f"level{level}.torgb.bias"] = (3,)
        prev = c
    return shapes


def init_generator_params(cfg, rng, dtype=np.float32):
    """Fresh parameters drawn in the order of the parameter listing.

    Mapping, channel projection and RGB weights use ``std = 1/sqrt(fan_in)``;
    the learned constant is standard normal; style affines, attention
    weights, positional embeddings and bias tables use ``std = 0.02``. All
    biases start at zero. Normal draws are truncated at two standard
    deviations from zero in units of the mapping scale.
    """
    dtype = check_dtype(dtype)
    rng = make_rng(rng)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        arr = np.empty(shape, dtype=dtype)
        if name.endswith(".bias"):
            arr[...] = 0
        elif name == "const":
            trunc_normal_fill(arr, rng, 0.0, 1.0, -2.0, 2.0)
        elif name.startswith("mapping.") or ".inproj." in name or ".torgb." in name:
            std = 1.0 / math.sqrt(shape[1])
            trunc_normal_fill(arr, rng, 0.0, std, -2.0 * std, 2.0 * std)
        else:
            trunc_normal_fill(arr, rng, 0.0, 0.02, -2.0, 2.0)
        params[name] = arr
    return params


def check_params(cfg, params):
    expected = _param_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ConfigError(f"parameters missing for config: {missing[:5]}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ConfigError(f"parameter {name} has shape {tuple(params[name].shape)}, expected {shape}")
    return params


# --- forward pass -----------------------------------------------------------------

def sample_latents(rng, batch, latent_dim=LATENT_DIM, dtype=np.float32):
    return make_rng(rng).standard_normal((batch, latent_dim)).astype(check_dtype(dtype))


def mapping_forward(z, params, num_layers=None, slope=0.2):
    """Pixel-normalize ``z`` then apply ``linear -> leaky_relu`` blocks."""
    z = check_tensor(z, ndim=2, name="z")
    if num_layers is None:
        num_layers = sum(1 for k in params if k.startswith("mapping.") and k.endswith(".weight"))
    w = z / np.sqrt(np.mean(z * z, axis=1, keepdims=True) + z.dtype.type(1e-8))
    for i in range(num_layers):
        w = leaky_relu(linear(w, params[f"mapping.{i}.weight"], params[f"mapping.{i}.bias"]), slope)
    return w


def layer_norm(x, eps=1e-5):
    """Per-pixel normalization over the channel (last) axis, no learned affine."""
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + x.dtype.type(eps))


def modulate(x, w, scale_weight, scale_bias, shift_weight, shift_bias):
    """Adaptive layer norm: ``norm(x) * (1 + s(w)) + b(w)`` with per-channel ``s, b``."""
    x = check_tensor(x, ndim=4, name="x")
    w = check_tensor(w, ndim=2, name="w")
    if w.shape[0] != x.shape[0]:
        raise DimensionError(f"style batch {w.shape[0]} does not match feature batch {x.shape[0]}")
    s = linear(w, scale_weight, scale_bias)
    b = linear(w, shift_weight, shift_bias)
    if s.shape[-1] != x.shape[-1]:
        raise DimensionError(f"style affine yields {s.shape[-1]} channels, features have {x.shape[-1]}")
    return layer_norm(x) * (1 + s[:, None, None, :]) + b[:, None, None, :]


def _hydra_params(params, prefix, heads):
    tensors = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    return hy.HydraParams.from_named(tensors, heads)


def _nchw_upsample(x):
    return upsample_bilinear_2x(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).transpose(0, 2, 3, 1)


def synthesis_forward(w, cfg, params, capture=None):
    """Render ``[B, 3, R, R]`` images from styles ``w``.

    ``capture``, when a dict, receives ``(level, layer) -> list of q/k
    records`` from every attention layer.
    """
    w = check_tensor(w, ndim=2, name="w")
    if w.shape[1] != cfg.latent_dim:
        raise ConfigError(f"style width {w.shape[1]} does not match latent_dim {cfg.latent_dim}")
    check_params(cfg, params)
    batch = w.shape[0]
    dtype = params["const"].dtype
    w = w.astype(dtype, copy=False)
    x = np.broadcast_to(params["const"].transpose(1, 2, 0), (batch, 4, 4, cfg.channels[4])).astype(dtype)
    rgb = None
    for level in cfg.resolutions:
        if level > 4:
            x = np.ascontiguousarray(_nchw_upsample(x))
            if f"level{level}.inproj.weight" in params:
                x = linear(x, params[f"level{level}.inproj.weight"], params[f"level{level}.inproj.bias"])
        heads = cfg.heads[level]
        for layer in (1, 2):
            pre = f"level{level}.layer{layer}"
            h = modulate(x, w, params[f"{pre}.style_scale.weight"], params[f"{pre}.style_scale.bias"],
                         params[f"{pre}.style_shift.weight"], params[f"{pre}.style_shift.bias"])
            attn_params = _hydra_params(params, f"{pre}.attn.", heads)
            rec = None
            if capture is not None:
                rec = capture.setdefault((level, layer), [])
            if level == 4:
                x = x + hy.mhsa_forward(h + params[f"{pre}.pos"], heads, attn_params, capture=rec)
            else:
                x = x + hy.hydra_forward(h, cfg.plans[level], attn_params, capture=rec)
        contrib = linear(x, params[f"level{level}.torgb.weight"], params[f"level{level}.torgb.bias"])
        rgb = contrib if rgb is None else np.ascontiguousarray(_nchw_upsample(rgb)) + contrib
    return np.ascontiguousarray(rgb.transpose(0, 3, 1, 2))


# --- accounting ---------------------------------------------------------------------

def count_generator_params(cfg):
    """Closed-form parameter count; equals the summed sizes of :func:`init_generator_params`."""
    latent = cfg.latent_dim
    total = cfg.mapping_layers * (latent * latent + latent)
    total += cfg.channels[4] * 16
    prev = None
    for level in cfg.resolutions:
        c = cfg.channels[level]
        if prev is not None and prev != c:
            total += prev * c + c
        per_layer = 2 * (latent * c + c)
        if level == 4:
            per_layer += 16 * c + 4 * c * c + 4 * c
        else:
            per_layer += hy.count_params(c, cfg.plans[level], qkv_bias=True)
        total += 2 * per_layer + 3 * c + 3
        prev = c
    return total


def count_generator_macs(cfg, batch=1):
    """Multiply-accumulates of mapping plus synthesis (interpolation and norms excluded)."""
    latent = cfg.latent_dim
    total = batch * cfg.mapping_layers * latent * latent
    prev = None
    for level in cfg.resolutions:
        c = cfg.channels[level]
        pixels = batch * level * level
        if prev is not None and prev != c:
            total += pixels * prev * c
        for _ in (1, 2):
            total += batch * 2 * latent * c
            if level == 4:
                total += hy.count_mhsa_macs(c, cfg.heads[level], level, level, batch)
            else:
                total += hy.count_macs(c, cfg.plans[level], level, level, batch)
        total += pixels * c * 3
        prev = c
    return total
