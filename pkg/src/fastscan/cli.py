"""Command-line harness: verify / gradcheck / flops / bench / forward.

Exit codes: 0 success, 1 property failure, 2 I/O error, 3 config or
manifest mismatch. Heavy imports happen inside commands so --threads can
pin the math library pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_IO = 2
EXIT_CONFIG = 3


def _pin_threads(requested: int | None, default: int | None) -> None:
    """Set math-library thread counts; FASTSCAN_THREADS is the fallback."""
    count = requested
    if count is None:
        env = os.environ.get("FASTSCAN_THREADS")
        count = int(env) if env else default
    if count is None:
        return
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(count)


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if out:
        with open(out, "w") as f:
            f.write(text + "\n")


def cmd_verify(args) -> int:
    from .verify import run_suite

    report = run_suite(seed=args.seed, fault=args.fault)
    _emit(report, args.out)
    return EXIT_OK if report["all_pass"] else EXIT_PROPERTY


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seed=args.seed)
    _emit(report, args.out)
    return EXIT_OK if report["all_pass"] else EXIT_PROPERTY


def cmd_flops(args) -> int:
    from .flops import count_flops_model, reduction_fraction

    models = [m for m in args.models.split(",") if m]
    resolutions = [int(r) for r in args.resolutions.split(",") if r]
    if not models or not resolutions:
        print("error: need at least one model and one resolution", file=sys.stderr)
        return EXIT_IO

    reports = [count_flops_model(m, r) for m in models for r in resolutions]
    if args.format == "csv":
        lines = ["resolution,model,component,flops"]
        for rep in reports:
            for component, flops in rep.components.items():
                lines.append(f"{rep.resolution},{rep.model},{component},{flops:.0f}")
            lines.append(f"{rep.resolution},{rep.model},total,{rep.total:.0f}")
        text = "\n".join(lines)
        print(text)
        if args.out:
            try:
                with open(args.out, "w") as f:
                    f.write(text + "\n")
            except OSError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_IO
        return EXIT_OK

    doc = {
        "convention": reports[0].convention,
        "totals": {f"{r.model}@{r.resolution}": r.total for r in reports},
        "components": {
            f"{r.model}@{r.resolution}": r.components for r in reports
        },
    }
    reductions = {}
    for model in models:
        if model.startswith("fastvim-"):
            ref = "vim-" + model.split("-", 1)[1]
            if ref in models:
                for res in resolutions:
                    reductions[f"{model}_vs_{ref}@{res}"] = reduction_fraction(
                        model, ref, res)
    if reductions:
        doc["reductions"] = reductions
    _emit(doc, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import MIN_REPEATS, MIN_WARMUP, run_bench, write_csv

    models = [m for m in args.models.split(",") if m]
    resolutions = [int(r) for r in args.resolutions.split(",") if r]
    if not models or not resolutions:
        print("error: need at least one model and one resolution", file=sys.stderr)
        return EXIT_IO
    if args.warmup < MIN_WARMUP or args.repeats < MIN_REPEATS:
        print(f"error: need --warmup >= {MIN_WARMUP} and --repeats >= {MIN_REPEATS}",
              file=sys.stderr)
        return EXIT_CONFIG
    records = run_bench(models, resolutions, warmup=args.warmup,
                        repeats=args.repeats, scan_kind=args.scan, seed=args.seed)
    try:
        write_csv(records, args.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_forward(args) -> int:
    import numpy as np

    from .encoder import (EncoderConfig, encoder_forward, init_encoder_params,
                          load_params)
    from .errors import DomainError, ManifestError, ShapeError
    from .fvt import FvtError, read_fvt, write_fvt

    try:
        image = read_fvt(args.input)
    except (OSError, FvtError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4:
        print(f"error: input must be (batch, C, H, W), got {image.shape}",
              file=sys.stderr)
        return EXIT_CONFIG
    batch, chan, height, width = image.shape

    overrides = {}
    if args.variant:
        overrides["variant"] = args.variant
    if args.ratio is not None:
        overrides["mask_ratio"] = args.ratio
    if args.mask_seed is not None:
        overrides["mask_seed"] = args.mask_seed
    if args.repeat_scale is not None:
        overrides["repeat_scale"] = args.repeat_scale
    if args.no_alternate:
        overrides["alternate"] = False
    if args.scan:
        overrides["scan"] = args.scan
    if args.unpooled:
        overrides["pooled"] = False

    try:
        if args.weights:
            try:
                config, params = load_params(args.weights)
            except (OSError, FvtError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_IO
            if (config.image_h, config.image_w, config.image_c) != (height, width, chan):
                print(f"error: weights were built for "
                      f"{config.image_h}x{config.image_w}x{config.image_c} inputs, "
                      f"got {height}x{width}x{chan}", file=sys.stderr)
                return EXIT_CONFIG
            if overrides:
                doc = config.to_dict()
                doc.update(overrides)
                config = EncoderConfig.from_dict(doc)
        else:
            doc = {}
            if args.config:
                try:
                    with open(args.config) as f:
                        doc = json.load(f)
                except OSError as exc:
                    print(f"error: {exc}", file=sys.stderr)
                    return EXIT_IO
                except json.JSONDecodeError as exc:
                    print(f"error: bad config JSON: {exc}", file=sys.stderr)
                    return EXIT_CONFIG
            doc.update({"image_h": height, "image_w": width, "image_c": chan})
            doc.update(overrides)
            config = EncoderConfig.from_dict(doc)
            params = init_encoder_params(config, args.seed)
        if args.save_weights:
            from .encoder import save_params

            save_params(args.save_weights, config, params)
        result = encoder_forward(image, config, params)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DomainError, ShapeError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        write_fvt(args.out, np.asarray(result.features, dtype=np.float64))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(result.trace, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastscan",
        description="Pooled selective-scan verification and benchmark harness.",
        epilog="Exit codes: 0 ok, 1 property failure, 2 I/O, 3 config/manifest.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run every module's invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault", choices=["flip-scan-sign"], default=None,
                   help="inject a fault as a negative control")
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_verify, default_threads=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck, default_threads=None)

    p = sub.add_parser("flops", help="analytic FLOP table")
    p.add_argument("--models", required=True,
                   help="comma list, e.g. vim-t,fastvim-t")
    p.add_argument("--resolutions", required=True, help="comma list, e.g. 224,2048")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_flops, default_threads=None)

    p = sub.add_parser("bench", help="wall-clock component benchmarks "
                       "(CSV: model,resolution,component,median_ns,depth,pooled_len)")
    p.add_argument("--models", required=True)
    p.add_argument("--resolutions", required=True)
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--scan", choices=["sequential", "parallel"], default="sequential")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None,
                   help="math-library threads (default 1; FASTSCAN_THREADS fallback)")
    p.set_defaults(fn=cmd_bench, default_threads=1)

    p = sub.add_parser("forward", help="run the encoder on an FVT1 tensor")
    p.add_argument("--input", required=True, help="FVT1 image tensor (batch, C, H, W)")
    p.add_argument("--out", required=True, help="FVT1 output features (batch, D)")
    p.add_argument("--config", help="JSON config: preset, P, N, E, k, pooling, "
                   "variant, scan, post_norm, class_token")
    p.add_argument("--weights", help="weights directory with manifest.json")
    p.add_argument("--save-weights", dest="save_weights",
                   help="dump the parameters used to this directory")
    p.add_argument("--random-init", action="store_true", dest="random_init")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=["dense", "masked", "channel"])
    p.add_argument("--ratio", type=float, default=None, help="mask ratio")
    p.add_argument("--mask-seed", type=int, default=None)
    p.add_argument("--repeat-scale", type=float, default=None)
    p.add_argument("--no-alternate", action="store_true")
    p.add_argument("--unpooled", action="store_true",
                   help="run the unpooled reference pipeline")
    p.add_argument("--scan", choices=["sequential", "parallel"])
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_forward, default_threads=None)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "forward" and not args.weights and not args.random_init:
        print("error: forward needs --weights DIR or --random-init", file=sys.stderr)
        return EXIT_CONFIG
    _pin_threads(args.threads, args.default_threads)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
