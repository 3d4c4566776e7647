"""Verification routines shared by the CLI and the test suite.

* oracle grid: Hydra-NA forward against the masked dense reference;
* finite-difference gradient checks of the neighborhood kernels and of a
  complete Hydra layer;
* throughput benchmark of the NA path against the dense reference.

Relative error throughout is ``max|a - b| / max(max|b|, 1e-30)`` with ``b``
the reference.
"""

import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import hydra as hy
from . import neighborhood as na
from .exceptions import InvalidSpecError
from .neighborhood import NeighborhoodSpec
from .tensor import make_rng
from .validation import check_dtype

__all__ = [
    "ORACLE_TOLERANCE",
    "relative_error",
    "numeric_gradient",
    "oracle_case",
    "oracle_grid",
    "gradcheck_na_kernels",
    "gradcheck_hydra",
    "run_gradcheck",
    "benchmark",
]

ORACLE_TOLERANCE = {"f32": 1e-5, "f64": 1e-10}
GRAD_TOLERANCE = 1e-4


def relative_error(actual, expected):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return float(np.abs(actual - expected).max() / max(np.abs(expected).max(), 1e-30))


def numeric_gradient(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


@dataclass
class OracleResult:
    height: int
    width: int
    kernel: int
    dilation: int
    dtype: str
    max_abs: float = float("nan")
    rel_error: float = float("nan")
    skipped: str = ""

    @property
    def passed(self):
        return bool(self.skipped) or self.max_abs <= ORACLE_TOLERANCE[self.dtype]


def oracle_case(height, width, kernel, dilation, dtype="f64", seed=0, heads=2, head_dim=4):
    """Run one layer through both backends; ``max_abs`` is the elementwise worst case."""
    res = OracleResult(height, width, kernel, dilation, dtype)
    try:
        spec = NeighborhoodSpec(kernel, dilation).check_fits(height, width)
    except InvalidSpecError:
        res.skipped = "skipped: invalid spec"
        return res
    np_dtype = check_dtype(dtype)
    rng = make_rng(seed)
    plan = hy.PartitionPlan(heads, ((heads, spec),))
    dim = heads * head_dim
    params = hy.init_hydra_params(dim, plan, rng, dtype=np_dtype)
    params.qkv_weight[...] = rng.standard_normal(params.qkv_weight.shape) * 0.5
    params.rpb[0][...] = rng.standard_normal(params.rpb[0].shape)
    x = rng.standard_normal((1, height, width, dim)).astype(np_dtype)
    fast = hy.hydra_forward(x, plan, params)
    ref = hy.hydra_forward(x, plan, params, backend="dense")
    res.max_abs = float(np.abs(fast.astype(np.float64) - ref).max())
    res.rel_error = relative_error(fast, ref)
    return res


def oracle_grid(sizes, kernels, dilations=None, dtype="f64", seed=0):
    """Cases over all ``(H, W)`` pairs from ``sizes``; ``dilations=None`` means every fitting one."""
    out = []
    for h in sizes:
        for w in sizes:
            for k in kernels:
                ds = dilations if dilations is not None else range(1, min(h, w) // k + 1)
                for d in ds:
                    out.append(oracle_case(h, w, k, d, dtype, seed))
    return out


# --- gradient checks ------------------------------------------------------------------

def gradcheck_na_kernels(seed=0, size=8, heads=2, head_dim=4, spec=NeighborhoodSpec(3, 2), h=1e-5):
    """Worst relative error per cotangent of ``na2d_qk`` and ``na2d_av``."""
    rng = make_rng(seed)
    shape = (1, heads, size, size, head_dim)
    nmap = na.build_index_map(size, size, spec)
    q, kt, v = (rng.uniform(-1, 1, shape) for _ in range(3))
    side = 2 * spec.kernel - 1
    rpb = rng.uniform(-1, 1, (heads, side, side))
    attn = rng.uniform(-1, 1, shape[:4] + (spec.kernel ** 2,))
    g_qk = rng.uniform(-1, 1, attn.shape)
    g_av = rng.uniform(-1, 1, shape)

    dq, dk, drpb = na.na2d_qk_vjp(q, kt, nmap, g_qk)
    da, dv = na.na2d_av_vjp(attn, v, nmap, g_av)
    f_qk = lambda: float((na.na2d_qk(q, kt, nmap, rpb) * g_qk).sum())  # noqa: E731
    f_av = lambda: float((na.na2d_av(attn, v, nmap) * g_av).sum())  # noqa: E731
    return {
        "na2d_qk.q": relative_error(dq, numeric_gradient(f_qk, q, h)),
        "na2d_qk.kt": relative_error(dk, numeric_gradient(f_qk, kt, h)),
        "na2d_qk.rpb": relative_error(drpb, numeric_gradient(f_qk, rpb, h)),
        "na2d_av.attn": relative_error(da, numeric_gradient(f_av, attn, h)),
        "na2d_av.v": relative_error(dv, numeric_gradient(f_av, v, h)),
    }


def gradcheck_hydra(seed=0, size=8, dim=16, heads=4, kernels=(3, 3), dilations=(1, 2), h=1e-5):
    """Worst relative error for ``x`` and every parameter of one Hydra layer."""
    rng = make_rng(seed)
    plan = hy.PartitionPlan.from_lists(heads, kernels, dilations)
    params = hy.init_hydra_params(dim, plan, rng, dtype=np.float64)
    for name, t in params.named_tensors().items():
        t[...] = rng.uniform(-1, 1, t.shape) * (0.5 if name.startswith("qkv") else 1.0)
    x = rng.uniform(-1, 1, (1, size, size, dim))
    g = rng.uniform(-1, 1, x.shape)
    cache = hy.HydraCache()
    hy.hydra_forward(x, plan, params, cache=cache)
    grads = hy.hydra_backward(cache, g)
    f = lambda: float((hy.hydra_forward(x, plan, params) * g).sum())  # noqa: E731
    report = {"hydra.x": relative_error(grads["x"], numeric_gradient(f, x, h))}
    for name, t in params.named_tensors().items():
        report[f"hydra.{name}"] = relative_error(grads[name], numeric_gradient(f, t, h))
    return report


def run_gradcheck(seed=0):
    report = gradcheck_na_kernels(seed)
    report.update(gradcheck_hydra(seed))
    return report


# --- benchmark ---------------------------------------------------------------------

def _median_rate(fn, iters, warmup=1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(max(iters, 1)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1.0 / statistics.median(times)


def benchmark(size=64, kernel=7, dilation=1, heads=4, dim=64, iters=5, splits=1,
              compare_dense=False, seed=0, dtype="f32"):
    """Forward passes per second; setup time (params, index maps) is reported apart from the timing."""
    np_dtype = check_dtype(dtype)
    t0 = time.perf_counter()
    plan = hy.PartitionPlan.from_lists(heads, [kernel] * splits, [dilation] * splits).check_fits(size, size)
    rng = make_rng(seed)
    params = hy.init_hydra_params(dim, plan, rng, dtype=np_dtype)
    x = rng.standard_normal((1, size, size, dim)).astype(np_dtype)
    for spec in plan.specs:
        na.build_index_map(size, size, spec)
    setup = time.perf_counter() - t0
    report = {
        "size": size, "kernel": kernel, "dilation": dilation, "heads": heads, "dim": dim,
        "splits": splits, "iters": iters, "setup_seconds": setup,
        "macs": hy.count_macs(dim, plan, size, size, 1),
        "params": hy.count_params(dim, plan),
        "na_ops_per_s": _median_rate(lambda: hy.hydra_forward(x, plan, params), iters),
    }
    if compare_dense:
        report["dense_ops_per_s"] = _median_rate(
            lambda: hy.hydra_forward(x, plan, params, backend="dense"), iters)
        report["speedup"] = report["na_ops_per_s"] / report["dense_ops_per_s"]
    return report
