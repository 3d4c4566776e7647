"""End-to-end acceptance checks, one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` (the lines are printed even without ``-s``).
"""
import time

import numpy as np
import pytest

from hydranat.attnviz import na_attention_map, window_partition, window_reverse
from hydranat.checks import benchmark, oracle_grid, run_gradcheck
from hydranat.cli import main
from hydranat.generator import build_config_2split, build_config_pyramid
from hydranat.hydra import (
    HydraParams,
    PartitionPlan,
    count_macs,
    count_params,
    hydra_forward,
    init_hydra_params,
    mhsa_forward,
    partition_heads,
)
from hydranat.neighborhood import NeighborhoodSpec
from hydranat.tensor import load_hnat, make_rng


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip())
    return emit


def test_01_oracle_equivalence(report):
    t0 = time.perf_counter()
    worst, ran, ok = {}, 0, True
    for dtype in ("f32", "f64"):
        results = oracle_grid(range(7, 17), (3, 5, 7), dtype=dtype, seed=11)
        ran += sum(not r.skipped for r in results)
        ok &= all(r.passed for r in results)
        worst[dtype] = max(r.max_abs for r in results if not r.skipped)
    elapsed = time.perf_counter() - t0
    passed = ok and elapsed < 60
    report(1, "oracle equivalence", passed,
           f"cases={ran} f32={worst['f32']:.2e} f64={worst['f64']:.2e} time={elapsed:.1f}s")
    assert passed


def test_02_saturation_limit(report):
    # even kernels are rejected by construction, so the limit is exercised at the largest odd size
    size = 7
    rng = make_rng(2)
    plan = PartitionPlan(4, ((4, NeighborhoodSpec(size, 1)),))
    p = init_hydra_params(16, plan, rng, dtype=np.float64)
    p.qkv_weight[...] = rng.uniform(-1, 1, p.qkv_weight.shape)
    p.proj_weight[...] = rng.uniform(-1, 1, p.proj_weight.shape)
    p.rpb[0][...] = 0
    x = rng.standard_normal((2, size, size, 16))
    err = float(np.abs(hydra_forward(x, plan, p) - mhsa_forward(x, 4, p)).max())
    passed = err <= 1e-6
    report(2, "saturation limit", passed, f"k=H=W={size} max_abs={err:.2e}")
    assert passed


def test_03_gradient_suite(report):
    t0 = time.perf_counter()
    rel = run_gradcheck(seed=0)
    elapsed = time.perf_counter() - t0
    name, worst = max(rel.items(), key=lambda kv: kv[1])
    passed = worst < 1e-4 and elapsed < 120
    report(3, "gradient suite", passed, f"worst={name} rel={worst:.2e} time={elapsed:.1f}s")
    assert passed


def test_04_partition_invariance(report):
    counts = set()
    for splits in (1, 2, 4):
        plan = PartitionPlan.from_lists(8, [7] * splits, [1] * splits)
        counts.add((count_params(64, plan), count_macs(64, plan, 32, 32, 2)))
    rng = make_rng(4)
    split = PartitionPlan(4, ((2, NeighborhoodSpec(5, 2)), (2, NeighborhoodSpec(5, 2))))
    merged = PartitionPlan(4, ((4, NeighborhoodSpec(5, 2)),))
    p = init_hydra_params(32, split, rng)
    for t in p.rpb:
        t[...] = rng.standard_normal(t.shape).astype(np.float32)
    q = HydraParams(p.qkv_weight, p.qkv_bias, [np.concatenate(p.rpb)], p.proj_weight, p.proj_bias, p.scale)
    x = rng.standard_normal((2, 12, 12, 32)).astype(np.float32)
    err = float(np.abs(hydra_forward(x, split, p) - hydra_forward(x, merged, q)).max())
    passed = len(counts) == 1 and err <= 1e-6
    report(4, "partition invariance", passed, f"distinct counts={len(counts)} merge max_abs={err:.2e}")
    assert passed


def brute_remainder_reading(num_heads, num_splits):
    if num_heads % num_splits == 0:
        return [num_heads // num_splits] * num_splits
    diff = num_heads - num_splits * (num_heads // num_splits)
    shapes = []
    for i in range(num_splits):
        shapes.append(num_heads // num_splits + (1 if i >= num_splits - diff else 0))
    return shapes


def test_05_uneven_partition(report):
    literal = partition_heads(6, 4) == [1, 1, 2, 2] and partition_heads(10, 4) == [2, 2, 3, 3]
    sweep = all(partition_heads(h, s) == brute_remainder_reading(h, s)
                for h in range(1, 33) for s in range(1, h + 1))
    passed = literal and sweep
    report(5, "uneven partition rule", passed, "(6,4)->[1,1,2,2] (10,4)->[2,2,3,3], sweep h<=32")
    assert passed


def test_06_config_fidelity(report):
    two = build_config_2split(1024)
    rows_ok = 4 not in two.plans
    for i, level in enumerate([8, 16, 32, 64, 128, 256, 512, 1024]):
        wide = two.plans[level].specs[-1]
        rows_ok &= all(s.kernel == 7 for s in two.plans[level].specs)
        rows_ok &= (wide.dilation, wide.dilated_size) == (2 ** i, 7 * 2 ** i)
        rows_ok &= two.plans[level].specs[0].dilation == 1
    pyr = build_config_pyramid(1024)
    pyr_ok = all([s.dilation for s in pyr.plans[8 * 2 ** i].specs] == [2 ** j for j in range(i + 1)]
                 and all(s.kernel == 7 for s in pyr.plans[8 * 2 ** i].specs) for i in range(8))
    passed = bool(rows_ok and pyr_ok)
    report(6, "config fidelity", passed, "2-split levels 8..1024 and pyramid dilation lists")
    assert passed


def test_07_determinism(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"target": 32, "design": "2split", "seed": 7}')
    t0 = time.perf_counter()
    codes = [main(["sample", "--config", str(cfg), "--out", str(tmp_path / run)]) for run in ("a", "b")]
    elapsed = (time.perf_counter() - t0) / 2
    a, b = (tmp_path / "a/sample.hnat").read_bytes(), (tmp_path / "b/sample.hnat").read_bytes()
    img = load_hnat(tmp_path / "a/sample.hnat")
    passed = codes == [0, 0] and a == b and img.shape == (1, 3, 32, 32) and bool(np.isfinite(img).all()) \
        and elapsed < 10
    report(7, "determinism", passed, f"bytes equal={a == b} shape={list(img.shape)} time/run={elapsed:.1f}s")
    assert passed


def test_08_visualization_laws(report):
    rng = make_rng(8)
    q, kt = rng.standard_normal((2, 4, 16, 16, 8)), rng.standard_normal((2, 4, 16, 16, 8))
    sums = float(np.abs(na_attention_map(q, kt, 0.35).maps.sum(axis=(2, 3)) - 1).max())
    flat = np.broadcast_to(kt[:, :, :1, :1], kt.shape)
    uniform = float(np.abs(na_attention_map(q, flat).maps - 1 / 256).max())
    trip = all(window_reverse(window_partition(q, 8, s), 8, 16, 16, s).tobytes() == q.tobytes() for s in (0, 4))
    passed = sums <= 1e-5 and uniform <= 1e-12 and trip
    report(8, "visualization laws", passed, f"sum err={sums:.1e} uniform err={uniform:.1e} round trip={trip}")
    assert passed


def test_09_translation_equivariance(report):
    rng = make_rng(9)
    size, pad, dim = 16, 4, 16
    plan = PartitionPlan.from_lists(4, [3, 3], [1, 2])
    p = init_hydra_params(dim, plan, rng)
    for t in p.rpb:
        t[...] = rng.standard_normal(t.shape).astype(np.float32)
    big = rng.standard_normal((1, size + pad, size + pad, dim)).astype(np.float32)
    reach = max(s.kernel // 2 * s.dilation for s in plan.specs)
    interior = np.arange(reach, size - reach)
    worst = 0.0
    for sy, sx in [(1, 0), (0, 3), (2, 2), (4, 1)]:
        out_a = hydra_forward(big[:, :size, :size], plan, p)
        out_b = hydra_forward(big[:, sy:sy + size, sx:sx + size], plan, p)
        for y in interior:
            for x in interior:
                yb, xb = y - sy, x - sx
                if reach <= yb < size - reach and reach <= xb < size - reach:
                    worst = max(worst, float(np.abs(out_a[0, y, x] - out_b[0, yb, xb]).max()))
    passed = worst <= 1e-6
    report(9, "translation quasi-equivariance", passed, f"max_abs={worst:.2e}")
    assert passed


def test_10_performance(report):
    res = benchmark(size=64, kernel=7, dilation=1, heads=4, dim=64, iters=3, compare_dense=True)
    passed = res["speedup"] >= 2.0
    report(10, "performance sanity", passed,
           f"na={res['na_ops_per_s']:.2f}/s dense={res['dense_ops_per_s']:.2f}/s speedup={res['speedup']:.1f}x")
    assert passed
