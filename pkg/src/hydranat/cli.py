"""``hydranat`` command-line interface.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 I/O error.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checks
from . import generator as gen
from .attnviz import maps_from_capture, render_grayscale
from .exceptions import ConfigError, HydraNATError
from .io import load_params, save_params, to_uint8_rgb, write_json_atomic, write_pgm, write_ppm
from .tensor import save_hnat, spawn_rngs

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def parse_int_list(text):
    """``"7-16"``, ``"3,5,7"`` or a mix such as ``"7-9,12"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return out


def _load_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    try:
        return gen.config_from_dict(doc)
    except HydraNATError as exc:
        raise UsageError(f"bad config: {exc}") from None


def _generator_inputs(args):
    cfg = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    param_rng, latent_rng = spawn_rngs(seed, 2)
    if args.params:
        params = load_params(args.params)
        try:
            gen.check_params(cfg, params)
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
    else:
        params = gen.init_generator_params(cfg, param_rng)
    z = gen.sample_latents(latent_rng, 1, cfg.latent_dim, params["const"].dtype)
    return cfg, seed, params, z


def _manifest(args, command, seed, timings, checks_=None, **extra):
    return {
        "command": command,
        "config": getattr(args, "config", None),
        "seed": seed,
        "out": getattr(args, "out", None),
        "timings": timings,
        "checks": checks_ or [],
        **extra,
    }


def cmd_sample(args):
    t0 = time.perf_counter()
    cfg, seed, params, z = _generator_inputs(args)
    t1 = time.perf_counter()
    w = gen.mapping_forward(z, params, cfg.mapping_layers)
    img = gen.synthesis_forward(w, cfg, params)
    t2 = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_hnat(out / "sample.hnat", img)
    write_ppm(out / "sample.ppm", to_uint8_rgb(img[0]))
    if args.save_params:
        save_params(out / "params", params)
    finite = bool(np.isfinite(img).all())
    write_json_atomic(out / "manifest.json", _manifest(
        args, "sample", seed, {"setup_seconds": t1 - t0, "forward_seconds": t2 - t1},
        [{"name": "finite_output", "passed": finite}], shape=list(img.shape)))
    print(f"wrote {out / 'sample.ppm'} shape={list(img.shape)}")
    return EXIT_OK if finite else EXIT_CHECK


def cmd_attnmap(args):
    t0 = time.perf_counter()
    cfg, seed, params, z = _generator_inputs(args)
    if args.level not in cfg.resolutions:
        raise UsageError(f"level {args.level} not in config levels {cfg.resolutions}")
    capture = {}
    w = gen.mapping_forward(z, params, cfg.mapping_layers)
    gen.synthesis_forward(w, cfg, params, capture=capture)
    maps = maps_from_capture(capture[(args.level, args.layer)], normalized=not args.raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"level{args.level}_layer{args.layer}"
    save_hnat(out / f"{stem}.hnat", maps.maps)
    rasters = render_grayscale(maps, per_head_minmax=not args.global_minmax)
    for h, raster in enumerate(rasters):
        write_pgm(out / f"{stem}_head{h}.pgm", raster)
    sums = maps.maps.reshape(maps.maps.shape[0], maps.maps.shape[1], -1).sum(-1)
    record = {"name": "maps_sum_to_one", "passed": bool(np.all(np.abs(sums - 1) <= 1e-5)) or args.raw}
    write_json_atomic(out / "manifest.json", _manifest(
        args, "attnmap", seed, {"total_seconds": time.perf_counter() - t0}, [record],
        level=args.level, layer=args.layer, heads=len(rasters)))
    print(f"wrote {len(rasters)} maps to {out}")
    return EXIT_OK


def cmd_oracle_diff(args):
    t0 = time.perf_counter()
    results = checks.oracle_grid(args.sizes, args.kernels, args.dilations, args.dtype, args.seed)
    failed = 0
    records = []
    for r in results:
        tag = f"H={r.height:2d} W={r.width:2d} k={r.kernel} d={r.dilation}"
        if r.skipped:
            print(f"{tag}  {r.skipped}")
        else:
            status = "ok" if r.passed else "FAIL"
            failed += not r.passed
            print(f"{tag}  max_abs={r.max_abs:.3e}  rel={r.rel_error:.3e}  {status}")
        records.append({"name": tag, "passed": r.passed, "max_abs": r.max_abs, "skipped": r.skipped})
    tested = [r for r in results if not r.skipped]
    worst = max((r.rel_error for r in tested), default=0.0)
    print(f"{len(tested)} combinations, {failed} failed, max rel-error {worst:.3e} "
          f"(tolerance {checks.ORACLE_TOLERANCE[args.dtype]:g} {args.dtype})")
    if args.manifest:
        write_json_atomic(args.manifest, _manifest(
            args, "oracle-diff", args.seed, {"total_seconds": time.perf_counter() - t0}, records))
    return EXIT_CHECK if failed else EXIT_OK


def cmd_gradcheck(args):
    if args.dtype != "f64":
        raise UsageError("gradcheck runs in f64 only")
    t0 = time.perf_counter()
    report = checks.run_gradcheck(args.seed)
    for name, err in report.items():
        status = "ok" if err < checks.GRAD_TOLERANCE else "FAIL"
        print(f"{name:24s} rel_error={err:.3e}  {status}")
    worst_name = max(report, key=report.get)
    passed = report[worst_name] < checks.GRAD_TOLERANCE
    print(f"worst: {worst_name} rel_error={report[worst_name]:.3e} ({'pass' if passed else 'FAIL'})")
    if args.manifest:
        write_json_atomic(args.manifest, _manifest(
            args, "gradcheck", args.seed, {"total_seconds": time.perf_counter() - t0},
            [{"name": k, "passed": v < checks.GRAD_TOLERANCE, "rel_error": v} for k, v in report.items()]))
    return EXIT_OK if passed else EXIT_CHECK


def cmd_bench(args):
    try:
        report = checks.benchmark(args.size, args.kernel, args.dilation, args.heads, args.dim,
                                  args.iters, args.splits, args.compare_dense, args.seed)
    except HydraNATError as exc:
        raise UsageError(str(exc)) from None
    print(f"size={args.size} kernel={args.kernel} dilation={args.dilation} heads={args.heads} "
          f"dim={args.dim} splits={args.splits}")
    print(f"params: {report['params']}")
    print(f"macs: {report['macs']}")
    print(f"setup: {report['setup_seconds']:.4f} s")
    print(f"hydra-na: {report['na_ops_per_s']:.3f} ops/s")
    if args.compare_dense:
        print(f"dense-oracle: {report['dense_ops_per_s']:.3f} ops/s")
        print(f"speedup: {report['speedup']:.2f}x")
    if args.manifest:
        write_json_atomic(args.manifest, _manifest(args, "bench", args.seed, {}, [], report=report))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hydranat", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric worker threads (fallback: HYDRANAT_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    def generator_flags(p):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--params", default=None, help="directory holding params.json")

    p = sub.add_parser("sample", help="render one seeded sample")
    generator_flags(p)
    p.add_argument("--save-params", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("attnmap", help="dump per-head attention maps of one layer")
    generator_flags(p)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--layer", type=int, choices=(1, 2), required=True)
    p.add_argument("--raw", action="store_true", help="raw logits instead of softmax maps")
    p.add_argument("--global-minmax", action="store_true")
    p.set_defaults(func=cmd_attnmap)

    p = sub.add_parser("oracle-diff", help="compare Hydra-NA to the dense masked reference")
    p.add_argument("--sizes", type=parse_int_list, default=list(range(7, 17)))
    p.add_argument("--kernels", type=parse_int_list, default=[3, 5, 7])
    p.add_argument("--dilations", type=parse_int_list, default=None)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_oracle_diff)

    p = sub.add_parser("gradcheck", help="finite-difference check of all adjoints")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="forward throughput of Hydra-NA")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--kernel", type=int, default=7)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--splits", type=int, default=1)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--compare-dense", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads
    if threads is None and os.environ.get("HYDRANAT_THREADS"):
        threads = int(os.environ["HYDRANAT_THREADS"])
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        print(f"hydranat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"hydranat: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
