"""Neighborhood attention (NA) and its dilated form on 2-D feature maps.

Layout convention for every kernel here: ``[B, heads, H, W, C]`` with the
query already multiplied by its scale. A query at ``(y, x)`` attends to a
``k x k`` grid of keys taken every ``d`` pixels inside its residue class
``(y mod d, x mod d)``. Windows are clamped (shifted inward, never shrunk)
at the borders of each residue class, so every query sees exactly ``k*k``
keys and the relative offsets index a ``(2k-1) x (2k-1)`` bias table.
"""

import functools
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, InvalidSpecError
from .tensor import add_macs, softmax_last
from .validation import check_same_dtype, check_same_shape, check_tensor

__all__ = [
    "NeighborhoodSpec",
    "NeighborhoodIndexMap",
    "neighborhood_1d",
    "build_index_map",
    "na2d_qk",
    "na2d_av",
    "na2d_qk_vjp",
    "na2d_av_vjp",
    "na2d_attention",
    "dense_masked_attention",
    "masked_dense_attention",
    "window_mask",
    "window_attention",
]


@dataclass(frozen=True)
class NeighborhoodSpec:
    kernel: int
    dilation: int = 1

    def __post_init__(self):
        if not isinstance(self.kernel, (int, np.integer)) or self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidSpecError(f"kernel must be an odd positive integer, got {self.kernel!r}")
        if not isinstance(self.dilation, (int, np.integer)) or self.dilation < 1:
            raise InvalidSpecError(f"dilation must be a positive integer, got {self.dilation!r}")

    @property
    def dilated_size(self):
        return self.kernel * self.dilation

    def check_fits(self, *extents):
        for n in extents:
            if self.dilated_size > n:
                raise InvalidSpecError(
                    f"kernel {self.kernel} x dilation {self.dilation} = {self.dilated_size} "
                    f"exceeds map extent {n}"
                )
        return self


def neighborhood_1d(length, spec, i):
    """Neighbor indices and bias-table offsets for query ``i`` on an axis of ``length``."""
    spec.check_fits(length)
    if not 0 <= i < length:
        raise IndexError(f"query index {i} outside [0, {length})")
    k, d = spec.kernel, spec.dilation
    r = i % d
    members = -(-(length - r) // d)
    j = (i - r) // d
    start = min(max(j - k // 2, 0), members - k)
    t = np.arange(k)
    return r + (start + t) * d, (start + t) - j + (k - 1)


def _axis_tables(length, spec):
    idx = np.empty((length, spec.kernel), dtype=np.intp)
    off = np.empty((length, spec.kernel), dtype=np.intp)
    for i in range(length):
        idx[i], off[i] = neighborhood_1d(length, spec, i)
    return idx, off


@dataclass(frozen=True, eq=False)
class NeighborhoodIndexMap:
    """Precomputed neighbor and bias indices for an ``H x W`` map.

    ``neighbors[n, t]`` is the flat pixel index ``y * W + x`` of neighbor
    ``t`` of query pixel ``n``; ``rpb_index[n, t]`` is the flat cell
    ``ry * (2k - 1) + rx`` of the bias table. Neighbors are ordered row-major
    over the ``k x k`` grid.
    """

    height: int
    width: int
    spec: NeighborhoodSpec
    y_index: np.ndarray
    y_offset: np.ndarray
    x_index: np.ndarray
    x_offset: np.ndarray
    neighbors: np.ndarray
    rpb_index: np.ndarray

    @property
    def kernel(self):
        return self.spec.kernel

    @property
    def num_pixels(self):
        return self.height * self.width

    @property
    def num_neighbors(self):
        return self.spec.kernel ** 2

    def dense_mask(self):
        """Boolean ``[N, N]`` mask with ``mask[i, j]`` set iff key ``j`` is a neighbor of query ``i``."""
        n = self.num_pixels
        mask = np.zeros((n, n), dtype=bool)
        mask[np.arange(n)[:, None], self.neighbors] = True
        return mask


@functools.lru_cache(maxsize=256)
def _cached_map(height, width, kernel, dilation):
    spec = NeighborhoodSpec(kernel, dilation).check_fits(height, width)
    k = kernel
    yi, yo = _axis_tables(height, spec)
    xi, xo = _axis_tables(width, spec)
    neighbors = (yi[:, None, :, None] * width + xi[None, :, None, :]).reshape(height * width, k * k)
    rpb = (yo[:, None, :, None] * (2 * k - 1) + xo[None, :, None, :]).reshape(height * width, k * k)
    arrays = [yi, yo, xi, xo, neighbors, rpb]
    for a in arrays:
        a.setflags(write=False)
    return NeighborhoodIndexMap(height, width, spec, *arrays)


def build_index_map(height, width, spec):
    """Index map for ``(height, width, spec)``; cached and immutable."""
    if not isinstance(spec, NeighborhoodSpec):
        spec = NeighborhoodSpec(*spec)
    return _cached_map(int(height), int(width), int(spec.kernel), int(spec.dilation))


def _check_qkv(nmap, **tensors):
    named = list(tensors.items())
    arrays = [check_tensor(a, ndim=5, name=name) for name, a in named]
    check_same_shape(*zip(tensors.keys(), arrays))
    check_same_dtype(*arrays)
    _, _, h, w, _ = arrays[0].shape
    if (h, w) != (nmap.height, nmap.width):
        raise DimensionError(
            f"tensors are {h}x{w} but the index map was built for {nmap.height}x{nmap.width}"
        )
    return arrays


def _check_rpb(rpb, heads, kernel, dtype):
    rpb = np.asarray(rpb, dtype=dtype)
    if rpb.shape != (heads, 2 * kernel - 1, 2 * kernel - 1):
        raise DimensionError(
            f"rpb must have shape {(heads, 2 * kernel - 1, 2 * kernel - 1)}, got {rpb.shape}"
        )
    return rpb


def _gather(t, nmap):
    """``[B, h, H, W, C]`` -> ``[B, h, N, K, C]`` of neighbor values."""
    b, h, _, _, c = t.shape
    return t.reshape(b, h, nmap.num_pixels, c)[:, :, nmap.neighbors]


def _scatter(g, nmap, shape):
    """Adjoint of :func:`_gather`: sum ``[B, h, N, K, C]`` back onto pixels."""
    b, h, _, _, c = shape
    out = np.zeros((nmap.num_pixels, b, h, c), dtype=g.dtype)
    np.add.at(out, nmap.neighbors.ravel(), g.reshape(b, h, -1, c).transpose(2, 0, 1, 3))
    return np.ascontiguousarray(out.transpose(1, 2, 0, 3)).reshape(shape)


def na2d_qk(q, kt, nmap, rpb=None):
    """Attention logits ``[B, h, H, W, k*k]`` of pre-scaled queries against their neighbors."""
    q, kt = _check_qkv(nmap, q=q, kt=kt)
    b, h, hh, ww, c = q.shape
    n, kk = nmap.num_pixels, nmap.num_neighbors
    add_macs(b * h * n * kk * c)
    logits = (q.reshape(b, h, n, 1, c) @ _gather(kt, nmap).swapaxes(-1, -2)).reshape(b, h, n, kk)
    if rpb is not None:
        rpb = _check_rpb(rpb, h, nmap.kernel, q.dtype)
        logits = logits + rpb.reshape(h, -1)[:, nmap.rpb_index]
    return logits.reshape(b, h, hh, ww, kk)


def na2d_av(attn, v, nmap):
    """Neighbor-weighted sum of values: ``out[..., c] = sum_t attn[..., t] v[nbr(t), c]``."""
    (v,) = _check_qkv(nmap, v=v)
    attn = check_tensor(attn, ndim=5, name="attn")
    b, h, hh, ww, c = v.shape
    n, kk = nmap.num_pixels, nmap.num_neighbors
    if attn.shape != (b, h, hh, ww, kk):
        raise DimensionError(f"attn must have shape {(b, h, hh, ww, kk)}, got {attn.shape}")
    check_same_dtype(attn, v)
    add_macs(b * h * n * kk * c)
    out = attn.reshape(b, h, n, 1, kk) @ _gather(v, nmap)
    return out.reshape(b, h, hh, ww, c)


def na2d_qk_vjp(q, kt, nmap, upstream, with_rpb=True):
    """Cotangents ``(dq, dkt, drpb)`` of :func:`na2d_qk`; ``drpb`` is None without a bias."""
    q, kt = _check_qkv(nmap, q=q, kt=kt)
    b, h, _, _, c = q.shape
    n, kk = nmap.num_pixels, nmap.num_neighbors
    g = np.asarray(upstream, dtype=q.dtype).reshape(b, h, n, kk)
    dq = (g.reshape(b, h, n, 1, kk) @ _gather(kt, nmap)).reshape(q.shape)
    dkt = _scatter(g[..., None] * q.reshape(b, h, n, 1, c), nmap, kt.shape)
    drpb = None
    if with_rpb:
        side = 2 * nmap.kernel - 1
        drpb = np.zeros((h, side * side), dtype=q.dtype)
        cells = nmap.rpb_index.ravel()
        gs = g.sum(axis=0).reshape(h, -1)
        for head in range(h):
            drpb[head] = np.bincount(cells, weights=gs[head], minlength=side * side)
        drpb = drpb.reshape(h, side, side)
    return dq, dkt, drpb


def na2d_av_vjp(attn, v, nmap, upstream):
    """Cotangents ``(dattn, dv)`` of :func:`na2d_av`."""
    (v,) = _check_qkv(nmap, v=v)
    b, h, hh, ww, c = v.shape
    n, kk = nmap.num_pixels, nmap.num_neighbors
    attn = np.asarray(attn, dtype=v.dtype).reshape(b, h, n, kk)
    g = np.asarray(upstream, dtype=v.dtype).reshape(b, h, n, 1, c)
    dattn = (g @ _gather(v, nmap).swapaxes(-1, -2)).reshape(b, h, hh, ww, kk)
    dv = _scatter(attn[..., None] * g, nmap, v.shape)
    return dattn, dv


def na2d_attention(q, kt, v, nmap, rpb=None):
    """Composed NA path: logits, softmax over neighbors, weighted values."""
    return na2d_av(softmax_last(na2d_qk(q, kt, nmap, rpb)), v, nmap)


# --- dense reference paths ------------------------------------------------------

def _neg_inf(dtype):
    return dtype.type(-1e30 if dtype == np.float32 else -1e300)


def masked_dense_attention(q, kt, v, mask, bias=None, scale=1.0):
    """Full ``N x N`` attention with disallowed pairs pushed to a huge negative logit.

    ``mask`` is ``[N, N]`` boolean (True = allowed) and ``bias`` an optional
    ``[h, N, N]`` additive term. Used as the brute-force reference.
    """
    q = check_tensor(q, ndim=5, name="q")
    b, h, hh, ww, c = q.shape
    n = hh * ww
    qf = q.reshape(b, h, n, c)
    kf = np.asarray(kt, dtype=q.dtype).reshape(b, h, n, c)
    vf = np.asarray(v, dtype=q.dtype).reshape(b, h, n, -1)
    logits = (qf * q.dtype.type(scale)) @ kf.swapaxes(-1, -2)
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        logits = np.where(mask, logits, _neg_inf(q.dtype))
    out = softmax_last(logits) @ vf
    return out.reshape(b, h, hh, ww, vf.shape[-1])


def dense_masked_attention(q, kt, v, nmap, rpb=None, scale=1.0):
    """Neighborhood attention realized as masked full attention over all pixels."""
    q, kt, v = _check_qkv(nmap, q=q, kt=kt, v=v)
    h = q.shape[1]
    n = nmap.num_pixels
    rows = np.arange(n)[:, None]
    bias = None
    if rpb is not None:
        rpb = _check_rpb(rpb, h, nmap.kernel, q.dtype).reshape(h, -1)
        bias = np.zeros((h, n, n), dtype=q.dtype)
        bias[:, rows, nmap.neighbors] = rpb[:, nmap.rpb_index]
    return masked_dense_attention(q, kt, v, nmap.dense_mask(), bias, scale)


# --- windowed (Swin-style) baseline --------------------------------------------------

def window_mask(height, width, ws):
    """``[N, N]`` mask allowing pairs in the same non-overlapping ``ws x ws`` tile."""
    ys, xs = np.divmod(np.arange(height * width), width)
    tile = (ys // ws) * (width // ws) + xs // ws
    return tile[:, None] == tile[None, :]


def _window_bias(height, width, ws, rpb_w):
    ys, xs = np.divmod(np.arange(height * width), width)
    ry = (ys[None, :] % ws) - (ys[:, None] % ws) + ws - 1
    rx = (xs[None, :] % ws) - (xs[:, None] % ws) + ws - 1
    return rpb_w[:, ry, rx]


def window_attention(q, kt, v, ws, shifted=False, rpb_w=None, scale=1.0):
    """Dense attention inside ``ws x ws`` tiles, optionally after a half-window cyclic shift.

    The shifted variant does not mask pairs that wrap around the border.
    """
    q, kt, v = (check_tensor(t, ndim=5, name=nm) for nm, t in (("q", q), ("kt", kt), ("v", v)))
    check_same_shape(("q", q), ("kt", kt), ("v", v))
    b, h, hh, ww, c = q.shape
    if hh % ws or ww % ws:
        raise DimensionError(f"window size {ws} does not divide map {hh}x{ww}")
    shift = ws // 2 if shifted else 0
    if shift:
        q, kt, v = (np.roll(t, (-shift, -shift), axis=(2, 3)) for t in (q, kt, v))
    bias = None
    if rpb_w is not None:
        rpb_w = np.asarray(rpb_w, dtype=q.dtype)
        if rpb_w.shape != (h, 2 * ws - 1, 2 * ws - 1):
            raise DimensionError(f"rpb_w must have shape {(h, 2 * ws - 1, 2 * ws - 1)}, got {rpb_w.shape}")
        bias = _window_bias(hh, ww, ws, rpb_w)
    # tile-by-tile keeps the work at N * ws^2 instead of N^2
    nwy, nwx = hh // ws, ww // ws

    def tiles(t):
        t = t.reshape(b, h, nwy, ws, nwx, ws, -1).transpose(0, 1, 2, 4, 3, 5, 6)
        return t.reshape(b, h, nwy * nwx, ws * ws, t.shape[-1])

    qt, kt_t, vt = tiles(q), tiles(kt), tiles(v)
    logits = (qt * q.dtype.type(scale)) @ kt_t.swapaxes(-1, -2)
    if bias is not None:
        # bias depends only on within-tile positions
        first = window_mask(hh, ww, ws)[0]
        local = bias[:, np.flatnonzero(first)][:, :, np.flatnonzero(first)]
        logits = logits + local[None, :, None]
    out = softmax_last(logits) @ vt
    out = out.reshape(b, h, nwy, nwx, ws, ws, -1).transpose(0, 1, 2, 4, 3, 5, 6).reshape(b, h, hh, ww, -1)
    if shift:
        out = np.roll(out, (shift, shift), axis=(2, 3))
    return np.ascontiguousarray(out)
