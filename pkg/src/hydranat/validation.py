"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import DimensionError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def check_dtype(dtype):
    """Normalize ``dtype`` (``"f32"``, ``"f64"``, numpy dtype) to a supported numpy dtype."""
    aliases = {"f32": np.float32, "float32": np.float32, "f64": np.float64, "float64": np.float64}
    if isinstance(dtype, str):
        if dtype not in aliases:
            raise ValueError(f"unsupported dtype {dtype!r}; expected f32 or f64")
        dtype = aliases[dtype]
    dtype = np.dtype(dtype)
    if dtype not in SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; expected float32 or float64")
    return dtype


def check_tensor(x, *, ndim=None, name="x", dtype=None):
    """Return ``x`` as a contiguous float32/float64 array, validating rank.

    Integer or other non-float inputs are converted to ``dtype`` (float64 when
    not given). Float inputs keep their type unless ``dtype`` is set.
    """
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(check_dtype(dtype), copy=False)
    elif arr.dtype not in SUPPORTED_DTYPES:
        arr = arr.astype(np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if arr.ndim and 0 in arr.shape:
        raise DimensionError(f"{name} has an empty extent: shape {arr.shape}")
    return np.ascontiguousarray(arr)


def check_same_dtype(*arrays):
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) > 1:
        raise DimensionError(f"mixed element types {sorted(str(d) for d in dtypes)}")
    return dtypes.pop()


def check_same_shape(*named):
    """``named`` is a sequence of ``(name, array)`` pairs that must share a shape."""
    ref_name, ref = named[0]
    for name, arr in named[1:]:
        if arr.shape != ref.shape:
            raise DimensionError(
                f"{name} has shape {arr.shape} but {ref_name} has shape {ref.shape}"
            )
