"""Dense tensor primitives and their vector-Jacobian products.

Tensors are plain C-contiguous numpy arrays of ``float32`` or ``float64``.
``float32`` matrix products accumulate in ``float64`` and round once at the
end, so oracle comparisons in single precision can be held to ``1e-5``.

Randomness comes from :func:`make_rng`, a ``numpy.random.Generator`` over the
PCG64 bit generator. Every draw advances the stream by exactly the samples it
consumes, so a fixed seed and a fixed call order reproduce bit-identical
buffers on every platform numpy supports.
"""

import contextlib
import contextvars
import struct

import numpy as np

from .exceptions import ContractError, DimensionError
from .validation import check_dtype, check_same_dtype, check_tensor

__all__ = [
    "make_rng",
    "spawn_rngs",
    "strides_for",
    "flat_index",
    "matmul",
    "linear",
    "softmax_last",
    "reduce_mean",
    "leaky_relu",
    "upsample_bilinear_2x",
    "trunc_normal_fill",
    "vjp",
    "mac_counter",
    "save_hnat",
    "load_hnat",
    "hnat_bytes",
    "hnat_from_bytes",
]

_MACS = contextvars.ContextVar("hydranat_macs", default=None)


@contextlib.contextmanager
def mac_counter():
    """Count multiply-accumulates performed by instrumented primitives.

    Yields a one-element list whose entry grows as ``matmul``, ``linear`` and
    the neighborhood attention kernels run inside the block.
    """
    box = [0]
    token = _MACS.set(box)
    try:
        yield box
    finally:
        _MACS.reset(token)


def add_macs(n):
    box = _MACS.get()
    if box is not None:
        box[0] += int(n)


def make_rng(seed):
    """PCG64-backed generator; ``seed`` is an unsigned 64-bit integer."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def spawn_rngs(seed, n):
    """``n`` independent PCG64 streams derived from one seed via ``SeedSequence.spawn``."""
    return [np.random.Generator(np.random.PCG64(child))
            for child in np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).spawn(n)]


def strides_for(shape):
    """Row-major element strides derived from ``shape`` alone."""
    strides = [1] * len(shape)
    for a in range(len(shape) - 2, -1, -1):
        strides[a] = strides[a + 1] * shape[a + 1]
    return tuple(strides)


def flat_index(shape, idx):
    return sum(i * s for i, s in zip(idx, strides_for(shape)))


def _accumulate(a, b):
    if a.dtype == np.float32:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    return a @ b


def matmul(a, b):
    a = check_tensor(a, ndim=2, name="a")
    b = check_tensor(b, ndim=2, name="b")
    check_same_dtype(a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    add_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return _accumulate(a, b)


def linear(x, w, b=None):
    """Affine map on the last axis: ``y[..., o] = sum_i x[..., i] w[o, i] + b[o]``."""
    x = check_tensor(x, name="x")
    w = check_tensor(w, ndim=2, name="w")
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear expects last extent {w.shape[1]}, got input shape {x.shape}")
    check_same_dtype(x, w)
    lead = x.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64))
    add_macs(rows * w.shape[0] * w.shape[1])
    y = _accumulate(x.reshape(rows, w.shape[1]), w.T)
    if b is not None:
        b = np.asarray(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match output extent {w.shape[0]}")
        y = y + b.astype(y.dtype, copy=False)
    return y.reshape(*lead, w.shape[0])


def softmax_last(x):
    """Max-subtracted softmax over the last axis."""
    x = check_tensor(x, name="x")
    if not np.isfinite(x).all():
        raise FloatingPointError("softmax_last received non-finite input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _normalize_axes(axes, ndim):
    if isinstance(axes, int):
        axes = (axes,)
    out = set()
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for a {ndim}-d tensor")
        out.add(a % ndim)
    return tuple(sorted(out))


def reduce_mean(x, axes):
    x = check_tensor(x, name="x")
    axes = _normalize_axes(axes, x.ndim)
    return x.mean(axis=axes)


def leaky_relu(x, slope=0.2):
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    x = check_tensor(x, name="x")
    return np.maximum(x, x * x.dtype.type(slope))


def _bilinear_axis(x, axis):
    n = x.shape[axis]
    out = np.arange(2 * n, dtype=np.float64)
    src = np.clip((out + 0.5) / 2.0 - 0.5, 0.0, n - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = (src - lo).astype(x.dtype)
    shape = [1] * x.ndim
    shape[axis] = 2 * n
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def upsample_bilinear_2x(x):
    """Bilinear 2x upsampling of ``[B, C, H, W]`` with half-pixel (align_corners=False) centers."""
    x = check_tensor(x, ndim=4, name="x")
    return np.ascontiguousarray(_bilinear_axis(_bilinear_axis(x, 2), 3))


def trunc_normal_fill(t, rng, mean=0.0, std=1.0, lo=-2.0, hi=2.0):
    """Fill ``t`` in place with normal samples, redrawing any outside ``[lo, hi]``.

    Draws are made in float64 in flat row-major order; rejected positions are
    redrawn in ascending index order until none remain.
    """
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    rng = make_rng(rng)
    flat = rng.normal(mean, std, size=t.size)
    bad = np.flatnonzero((flat < lo) | (flat > hi))
    while bad.size:
        flat[bad] = rng.normal(mean, std, size=bad.size)
        bad = bad[(flat[bad] < lo) | (flat[bad] > hi)]
    t[...] = flat.reshape(t.shape).astype(t.dtype)
    return t


# --- vector-Jacobian products -------------------------------------------------

def _vjp_matmul(a, b, g):
    return _accumulate(g, b.T), _accumulate(a.T, g)


def _vjp_linear(x, w, b, g):
    rows = g.size // g.shape[-1]
    g2 = g.reshape(rows, g.shape[-1])
    x2 = x.reshape(rows, x.shape[-1])
    dx = _accumulate(g2, w).reshape(x.shape)
    dw = _accumulate(g2.T, x2)
    db = None if b is None else g2.sum(axis=0)
    return dx, dw, db


def _vjp_softmax(x, g):
    y = softmax_last(x)
    return g * y - y * (g * y).sum(axis=-1, keepdims=True)


def _vjp_reduce_mean(x, axes, g):
    axes = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count).astype(x.dtype)


def _vjp_leaky_relu(x, slope, g):
    return np.where(x >= 0, g, g * slope).astype(x.dtype)


_VJPS = {
    "matmul": _vjp_matmul,
    "linear": _vjp_linear,
    "softmax_last": _vjp_softmax,
    "reduce_mean": _vjp_reduce_mean,
    "leaky_relu": _vjp_leaky_relu,
}


def vjp(op, saved, upstream):
    """Cotangents of a primitive's inputs given its forward inputs and the output cotangent.

    ``saved`` holds the forward arguments in call order: ``(a, b)`` for
    matmul, ``(x, w, b)`` for linear (``b`` may be None), ``(x,)`` for
    softmax_last, ``(x, axes)`` for reduce_mean and ``(x, slope)`` for
    leaky_relu. Always returns a tuple, even for single-input ops.
    """
    try:
        fn = _VJPS[op]
    except KeyError:
        raise ContractError(f"no VJP registered for op {op!r}") from None
    out = fn(*saved, np.asarray(upstream))
    return out if isinstance(out, tuple) else (out,)


# --- HNAT1 raw tensor format ----------------------------------------------------

HNAT_MAGIC = b"HNAT1\n"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def hnat_bytes(x):
    x = np.asarray(x)
    dtype = check_dtype(x.dtype)
    header = HNAT_MAGIC + struct.pack(f"<I{x.ndim}I", x.ndim, *x.shape)
    header += struct.pack("<B", _DTYPE_CODES[dtype])
    return header + np.ascontiguousarray(x, dtype=dtype.newbyteorder("<")).tobytes()


def hnat_from_bytes(buf):
    if not buf.startswith(HNAT_MAGIC):
        raise ValueError("not an HNAT1 stream (bad magic)")
    pos = len(HNAT_MAGIC)
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    (code,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown HNAT1 dtype code {code}")
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - pos != count * dtype.itemsize:
        raise ValueError("HNAT1 payload length does not match header")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    return data.astype(_CODE_DTYPES[code]).reshape(shape)


def save_hnat(path, x):
    with open(path, "wb") as fh:
        fh.write(hnat_bytes(x))


def load_hnat(path):
    with open(path, "rb") as fh:
        return hnat_from_bytes(fh.read())
