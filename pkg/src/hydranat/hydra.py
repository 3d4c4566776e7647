"""Hydra neighborhood attention: one QKV projection, heads split into partitions.

Each partition owns a contiguous slice of heads, its own ``(kernel,
dilation)`` and its own relative position bias table. Partition outputs are
concatenated back along the head axis in declaration order and projected.
"""

from dataclasses import dataclass, field

import numpy as np

from . import neighborhood as na
from .exceptions import ContractError, DimensionError, InvalidPlanError
from .neighborhood import NeighborhoodSpec
from .tensor import add_macs, linear, make_rng, softmax_last, trunc_normal_fill, vjp
from .validation import check_dtype, check_tensor

__all__ = [
    "partition_heads",
    "PartitionPlan",
    "HydraParams",
    "HydraCache",
    "init_hydra_params",
    "hydra_forward",
    "hydra_backward",
    "mhsa_forward",
    "count_params",
    "count_macs",
    "count_mhsa_macs",
]

# (B, H, W, 3, heads, head_dim) -> (3, B, heads, H, W, head_dim)
_QKV_PERM = (3, 0, 4, 1, 2, 5)
_QKV_INV = tuple(int(i) for i in np.argsort(_QKV_PERM))


def partition_heads(num_heads, num_splits):
    """Head counts per partition; any remainder goes one-each to the trailing partitions."""
    if num_splits < 1:
        raise InvalidPlanError(f"num_splits must be at least 1, got {num_splits}")
    if num_splits > num_heads:
        raise InvalidPlanError(f"cannot split {num_heads} heads into {num_splits} partitions")
    base = num_heads // num_splits
    diff = num_heads - num_splits * base
    return [base] * (num_splits - diff) + [base + 1] * diff


@dataclass(frozen=True)
class PartitionPlan:
    num_heads: int
    partitions: tuple

    def __post_init__(self):
        parts = tuple((int(h), s if isinstance(s, NeighborhoodSpec) else NeighborhoodSpec(*s))
                      for h, s in self.partitions)
        object.__setattr__(self, "partitions", parts)
        if not parts:
            raise InvalidPlanError("a plan needs at least one partition")
        if any(h < 1 for h, _ in parts):
            raise InvalidPlanError("every partition needs at least one head")
        if sum(h for h, _ in parts) != self.num_heads:
            raise InvalidPlanError(
                f"partition head counts {[h for h, _ in parts]} do not sum to {self.num_heads}"
            )

    @classmethod
    def from_lists(cls, num_heads, kernel_sizes, dilations=None):
        """Build a plan the way a layer is declared: one kernel (and dilation) per partition."""
        kernel_sizes = list(kernel_sizes)
        dilations = [1] * len(kernel_sizes) if dilations is None else list(dilations)
        if len(dilations) != len(kernel_sizes):
            raise InvalidPlanError("kernel_sizes and dilations must have the same length")
        counts = partition_heads(num_heads, len(kernel_sizes))
        return cls(num_heads, tuple(zip(counts, (NeighborhoodSpec(k, d) for k, d in zip(kernel_sizes, dilations)))))

    @property
    def num_splits(self):
        return len(self.partitions)

    @property
    def head_counts(self):
        return [h for h, _ in self.partitions]

    @property
    def specs(self):
        return [s for _, s in self.partitions]

    def head_slices(self):
        out, start = [], 0
        for h, _ in self.partitions:
            out.append(slice(start, start + h))
            start += h
        return out

    def check_fits(self, height, width):
        for spec in self.specs:
            spec.check_fits(height, width)
        return self


@dataclass
class HydraParams:
    qkv_weight: np.ndarray
    qkv_bias: np.ndarray | None
    rpb: list
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    scale: float

    @property
    def dim(self):
        return self.proj_weight.shape[0]

    def named_tensors(self):
        out = {"qkv.weight": self.qkv_weight}
        if self.qkv_bias is not None:
            out["qkv.bias"] = self.qkv_bias
        for i, table in enumerate(self.rpb):
            out[f"rpb.{i}"] = table
        out["proj.weight"] = self.proj_weight
        out["proj.bias"] = self.proj_bias
        return out

    @classmethod
    def from_named(cls, tensors, num_heads, qk_scale=None):
        dim = tensors["proj.weight"].shape[0]
        rpb = [tensors[f"rpb.{i}"] for i in range(sum(k.startswith("rpb.") for k in tensors))]
        return cls(
            tensors["qkv.weight"], tensors.get("qkv.bias"), rpb,
            tensors["proj.weight"], tensors["proj.bias"],
            _default_scale(dim, num_heads, qk_scale),
        )


def _default_scale(dim, num_heads, qk_scale):
    return float(qk_scale) if qk_scale else (dim // num_heads) ** -0.5


def init_hydra_params(dim, plan, rng, qkv_bias=True, qk_scale=None, dtype=np.float32, rpb=True):
    """Fresh parameters: linear weights and bias tables from a truncated normal (std 0.02), biases zero.

    Draw order is fixed: qkv weight, one table per partition, proj weight.
    ``rpb=False`` gives the bias-free layout used by dense self-attention.
    """
    if dim % plan.num_heads:
        raise DimensionError(f"dim {dim} is not divisible by num_heads {plan.num_heads}")
    dtype = check_dtype(dtype)
    rng = make_rng(rng)

    def tn(*shape):
        return trunc_normal_fill(np.empty(shape, dtype=dtype), rng, 0.0, 0.02, -2.0, 2.0)

    qkv_w = tn(3 * dim, dim)
    tables = [tn(h, 2 * s.kernel - 1, 2 * s.kernel - 1) for h, s in plan.partitions] if rpb else []
    proj_w = tn(dim, dim)
    return HydraParams(
        qkv_weight=qkv_w,
        qkv_bias=np.zeros(3 * dim, dtype=dtype) if qkv_bias else None,
        rpb=tables,
        proj_weight=proj_w,
        proj_bias=np.zeros(dim, dtype=dtype),
        scale=_default_scale(dim, plan.num_heads, qk_scale),
    )


@dataclass
class HydraCache:
    """Intermediates kept by :func:`hydra_forward` for :func:`hydra_backward`."""

    filled: bool = False
    deterministic: bool = True
    x: np.ndarray | None = None
    plan: PartitionPlan | None = None
    params: HydraParams | None = None
    attn_out: np.ndarray | None = None
    parts: list = field(default_factory=list)


def _dropout(x, p, rng):
    if p <= 0.0:
        return x
    keep = make_rng(rng).random(x.shape) >= p
    return np.where(keep, x / x.dtype.type(1.0 - p), 0).astype(x.dtype)


def _split_qkv(x, params, num_heads):
    b, h, w, dim = x.shape
    qkv = linear(x, params.qkv_weight, params.qkv_bias)
    qkv = qkv.reshape(b, h, w, 3, num_heads, dim // num_heads).transpose(_QKV_PERM)
    q, k, v = (np.ascontiguousarray(t) for t in qkv)
    return q * q.dtype.type(params.scale), k, v


def _merge_heads(out):
    b, heads, h, w, c = out.shape
    return np.ascontiguousarray(out.transpose(0, 2, 3, 1, 4)).reshape(b, h, w, heads * c)


def _check_input(x, dim, num_heads):
    x = check_tensor(x, ndim=4, name="x")
    if x.shape[-1] != dim:
        raise DimensionError(f"input channel extent {x.shape[-1]} does not match layer dim {dim}")
    if dim % num_heads:
        raise DimensionError(f"dim {dim} is not divisible by num_heads {num_heads}")
    return x


def hydra_forward(x, plan, params, deterministic=True, attn_drop=0.0, proj_drop=0.0,
                  rng=None, capture=None, cache=None, backend="na"):
    """Hydra-NA layer on ``x`` of shape ``[B, H, W, dim]``.

    ``backend="dense"`` swaps every partition's neighborhood kernels for the
    masked full-attention reference. Pass a list as ``capture`` to receive one
    ``{"q", "k", "scale", "spec", "heads"}`` record per partition (``q``
    unscaled), or an empty :class:`HydraCache` to enable
    :func:`hydra_backward`.
    """
    x = _check_input(x, params.dim, plan.num_heads)
    _, hh, ww, _ = x.shape
    plan.check_fits(hh, ww)
    if len(params.rpb) != plan.num_splits:
        raise DimensionError(f"{len(params.rpb)} bias tables for {plan.num_splits} partitions")
    if backend not in ("na", "dense"):
        raise ValueError(f"unknown backend {backend!r}")
    if not deterministic and (attn_drop > 0 or proj_drop > 0) and rng is None:
        raise ContractError("dropout needs an rng")

    q, k, v = _split_qkv(x, params, plan.num_heads)
    outs, parts = [], []
    for sl, (heads, spec), table in zip(plan.head_slices(), plan.partitions, params.rpb):
        qp, kp, vp = q[:, sl], k[:, sl], v[:, sl]
        nmap = na.build_index_map(hh, ww, spec)
        if capture is not None:
            capture.append({"q": qp / qp.dtype.type(params.scale), "k": kp, "scale": params.scale,
                            "spec": spec, "heads": heads})
        if backend == "dense":
            out = na.dense_masked_attention(qp, kp, vp, nmap, table, scale=1.0)
            logits = attn = None
        else:
            logits = na.na2d_qk(qp, kp, nmap, table)
            attn = softmax_last(logits)
            if not deterministic:
                attn = _dropout(attn, attn_drop, rng)
            out = na.na2d_av(attn, vp, nmap)
        outs.append(out)
        parts.append((sl, nmap, qp, kp, vp, logits, attn))

    merged = _merge_heads(np.concatenate(outs, axis=1))
    y = linear(merged, params.proj_weight, params.proj_bias)
    if not deterministic:
        y = _dropout(y, proj_drop, rng)
    if cache is not None:
        cache.filled = backend == "na"
        cache.deterministic = deterministic or (attn_drop <= 0 and proj_drop <= 0)
        cache.x, cache.plan, cache.params = x, plan, params
        cache.attn_out, cache.parts = merged, parts
    return y


def hydra_backward(cache, upstream):
    """Exact adjoint of a deterministic :func:`hydra_forward` call.

    Returns a dict with key ``"x"`` plus one entry per name in
    :meth:`HydraParams.named_tensors`.
    """
    if cache is None or not cache.filled:
        raise ContractError("hydra_backward needs a cache filled by hydra_forward(backend='na')")
    if not cache.deterministic:
        raise ContractError("hydra_backward requires a forward pass without dropout")
    params, plan = cache.params, cache.plan
    x = cache.x
    upstream = np.asarray(upstream, dtype=x.dtype)
    if upstream.shape != x.shape:
        raise DimensionError(f"upstream shape {upstream.shape} does not match output {x.shape}")

    d_merged, d_proj_w, d_proj_b = vjp("linear", (cache.attn_out, params.proj_weight, params.proj_bias), upstream)
    b, hh, ww, dim = x.shape
    heads, hd = plan.num_heads, dim // plan.num_heads
    d_out = d_merged.reshape(b, hh, ww, heads, hd).transpose(0, 3, 1, 2, 4)

    d_qkv = np.zeros((3, b, heads, hh, ww, hd), dtype=x.dtype)
    grads = {}
    for i, (sl, nmap, qp, kp, vp, logits, attn) in enumerate(cache.parts):
        d_attn, dv = na.na2d_av_vjp(attn, vp, nmap, d_out[:, sl])
        (d_logits,) = vjp("softmax_last", (logits,), d_attn)
        dq, dk, drpb = na.na2d_qk_vjp(qp, kp, nmap, d_logits)
        d_qkv[0, :, sl] = dq * x.dtype.type(params.scale)
        d_qkv[1, :, sl] = dk
        d_qkv[2, :, sl] = dv
        grads[f"rpb.{i}"] = drpb

    d_qkv = np.ascontiguousarray(d_qkv.transpose(_QKV_INV)).reshape(b, hh, ww, 3 * dim)
    dx, d_qkv_w, d_qkv_b = vjp("linear", (x, params.qkv_weight, params.qkv_bias), d_qkv)
    out = {"x": dx, "qkv.weight": d_qkv_w}
    if params.qkv_bias is not None:
        out["qkv.bias"] = d_qkv_b
    out.update(grads)
    out["proj.weight"] = d_proj_w
    out["proj.bias"] = d_proj_b
    return out


def mhsa_forward(x, heads, params, capture=None):
    """Dense multi-head self-attention over all ``H*W`` tokens, Hydra parameter layout, no bias."""
    x = _check_input(x, params.dim, heads)
    q, k, v = _split_qkv(x, params, heads)
    if capture is not None:
        capture.append({"q": q / q.dtype.type(params.scale), "k": k, "scale": params.scale,
                        "spec": None, "heads": heads})
    b, _, hh, ww, c = q.shape
    n = hh * ww
    add_macs(2 * b * heads * n * n * c)
    out = na.masked_dense_attention(q, k, v, None)
    return linear(_merge_heads(out), params.proj_weight, params.proj_bias)


def count_params(dim, plan, qkv_bias=True):
    qkv = 3 * dim * dim + (3 * dim if qkv_bias else 0)
    proj = dim * dim + dim
    return qkv + proj + sum(h * (2 * s.kernel - 1) ** 2 for h, s in plan.partitions)


def count_macs(dim, plan, height, width, batch=1):
    """Multiply-accumulates of one forward pass: projections plus both neighborhood gathers."""
    pixels = batch * height * width
    head_dim = dim // plan.num_heads
    attn = sum(pixels * h * 2 * s.kernel ** 2 * head_dim for h, s in plan.partitions)
    return pixels * 4 * dim * dim + attn


def count_mhsa_macs(dim, heads, height, width, batch=1):
    n = height * width
    return batch * n * 4 * dim * dim + batch * heads * 2 * n * n * (dim // heads)
