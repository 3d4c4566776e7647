"""Per-head attention maps for local attention layers.

The query is averaged over all pixels, then dotted with every key pixel; the
result is one ``H x W`` map per head. For windowed layers the window tiling
(and any cyclic shift) is undone first.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError
from .tensor import reduce_mean, softmax_last
from .validation import check_same_shape, check_tensor

__all__ = [
    "AttentionMaps",
    "na_attention_map",
    "window_partition",
    "window_reverse",
    "windowed_attention_map",
    "maps_from_capture",
    "render_grayscale",
]


@dataclass
class AttentionMaps:
    maps: np.ndarray
    normalized: bool = True

    @property
    def num_heads(self):
        return self.maps.shape[1]


def na_attention_map(q, kt, scale=1.0, normalized=True):
    """``[B, h, H, W]`` maps from queries and keys of shape ``[B, h, H, W, C]``."""
    q = check_tensor(q, ndim=5, name="q")
    kt = check_tensor(kt, ndim=5, name="kt")
    check_same_shape(("q", q), ("kt", kt))
    b, h, hh, ww, c = q.shape
    q_bar = reduce_mean(q * q.dtype.type(scale), axes=(2, 3))
    logits = (kt.reshape(b, h, hh * ww, c) @ q_bar[..., None])[..., 0]
    if normalized:
        logits = softmax_last(logits)
    return AttentionMaps(logits.reshape(b, h, hh, ww), normalized)


def window_partition(x, ws, shift=0):
    """``[B, h, H, W, C]`` -> ``[B * (H/ws) * (W/ws), h, ws*ws, C]``, rolling by ``-shift`` first."""
    x = check_tensor(x, ndim=5, name="x")
    b, h, hh, ww, c = x.shape
    if hh % ws or ww % ws:
        raise DimensionError(f"window size {ws} does not divide map {hh}x{ww}")
    if shift:
        x = np.roll(x, (-shift, -shift), axis=(2, 3))
    x = x.reshape(b, h, hh // ws, ws, ww // ws, ws, c).transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(x).reshape(-1, h, ws * ws, c)


def window_reverse(windows, ws, height, width, shift=0):
    """Exact inverse of :func:`window_partition`."""
    windows = check_tensor(windows, ndim=4, name="windows")
    nw, h, area, c = windows.shape
    if area != ws * ws:
        raise DimensionError(f"windows hold {area} pixels, expected {ws * ws}")
    if height % ws or width % ws:
        raise DimensionError(f"window size {ws} does not divide map {height}x{width}")
    per_image = (height // ws) * (width // ws)
    if nw % per_image:
        raise DimensionError(
            f"leading extent {nw} is not a multiple of {per_image} windows per {height}x{width} image"
        )
    b = nw // per_image
    x = windows.reshape(b, height // ws, width // ws, h, ws, ws, c).transpose(0, 3, 1, 4, 2, 5, 6)
    x = np.ascontiguousarray(x).reshape(b, h, height, width, c)
    if shift:
        x = np.roll(x, (shift, shift), axis=(2, 3))
    return x


def windowed_attention_map(q_win, k_win, ws, height, width, shifted=False, scale=1.0, normalized=True):
    shift = ws // 2 if shifted else 0
    q = window_reverse(q_win, ws, height, width, shift)
    k = window_reverse(k_win, ws, height, width, shift)
    return na_attention_map(q, k, scale, normalized)


def maps_from_capture(records, normalized=True):
    """Concatenate per-partition captures from one layer into a single map set."""
    maps = [na_attention_map(r["q"], r["k"], r["scale"], normalized).maps for r in records]
    return AttentionMaps(np.concatenate(maps, axis=1), normalized)


def render_grayscale(maps, per_head_minmax=True):
    """8-bit rasters, one per ``(batch, head)`` in row-major order; flat maps render as 128."""
    m = np.asarray(maps.maps if isinstance(maps, AttentionMaps) else maps, dtype=np.float64)
    if not np.isfinite(m).all():
        raise FloatingPointError("attention maps contain non-finite values")
    b, h, hh, ww = m.shape
    flat = m.reshape(b * h, hh * ww)
    if per_head_minmax:
        lo = flat.min(axis=1, keepdims=True)
        hi = flat.max(axis=1, keepdims=True)
    else:
        lo = np.full((b * h, 1), flat.min())
        hi = np.full((b * h, 1), flat.max())
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.floor((flat - lo) / safe * 255.0 + 0.5)
    out = np.where(span > 0, scaled, 128.0).astype(np.uint8)
    return [r.reshape(hh, ww) for r in out]
