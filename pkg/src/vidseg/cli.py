"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 numeric failure (non-finite loss or
a failed gradient check). Set VIDSEG_THREADS to cap BLAS thread counts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; the contract wants 1
    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise SystemExit(1 if status != 0 else 0)


def _build_parser():
    parser = _Parser(prog="vidseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark")
    p.add_argument("--spec", required=True, help="benchmark spec (JSON)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--data", required=True, help="dataset dir or manifest.json")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint manifest (.json)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", help="optional JSON result path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-grad", help="finite-difference gradient checks")
    p.add_argument("--module", action="append",
                   help="restrict to a check group (repeatable)")
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("bench", help="attention cost table")
    p.add_argument("--grid", required=True, help="grid spec (JSON)")
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("viz-attn", help="export encoder attention maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="sample directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="dataset dir (default: built-in benchmark)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_ablate)

    return parser


def cmd_gen_data(args):
    from .data import make_benchmark, write_dataset

    with open(args.spec) as fh:
        spec = json.load(fh)
    manifest = make_benchmark(
        spec["counts"],
        args.seed,
        frames=spec.get("frames", 3),
        height=spec.get("height", 64),
        width=spec.get("width", 64),
    )
    write_dataset(manifest, args.out)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}")
    return 0


def cmd_train(args):
    from .config import TrainConfig
    from .train import load_training_data, train

    cfg = TrainConfig.from_file(args.config)
    train_samples = load_training_data(args.data, "train")
    val_samples = load_training_data(args.data, "val")
    train(cfg, train_samples, val_samples or None, out_dir=args.out)
    print(f"run artifacts in {args.out}")
    return 0


def cmd_eval(args):
    from .train import evaluate_model, load_checkpoint, load_training_data

    model, _, _, _ = load_checkpoint(args.ckpt)
    samples = load_training_data(args.data, args.split)
    result = evaluate_model(model, samples)
    print(result.to_table())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(result.to_json() + "\n")
    return 0


def cmd_check_grad(args):
    from .gradcheck import run_checks

    reports = run_checks(args.module)
    width = max(len(f"{r.group}/{r.name}") for r in reports)
    ok = True
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.group + '/' + r.name:<{width}}  {r.max_error:.3e}")
        ok &= r.passed
    return 0 if ok else 2


def cmd_bench(args):
    from .bench import bench_grid, load_grid, to_csv

    rows = bench_grid(load_grid(args.grid))
    csv = to_csv(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv)
        print(f"wrote {args.out}")
    else:
        print(csv, end="")
    return 0


def cmd_viz(args):
    from .train import visualize_attention

    paths = visualize_attention(args.ckpt, args.sample, args.out)
    for p in paths:
        print(p)
    return 0


def cmd_ablate(args):
    from .config import TrainConfig
    from .data import make_benchmark, samples_from_manifest
    from .train import ABLATION_BENCHMARK, ablation_table, load_training_data, run_ablation

    cfg = TrainConfig.from_file(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if args.data:
        train_samples = load_training_data(args.data, "train")
        val_samples = load_training_data(args.data, "val")
    else:
        manifest = make_benchmark(ABLATION_BENCHMARK, seed=cfg.seed,
                                  frames=cfg.frames, height=cfg.image_size,
                                  width=cfg.image_size)
        train_samples = samples_from_manifest(manifest, "train")
        val_samples = samples_from_manifest(manifest, "val")
    report = run_ablation(cfg, train_samples, val_samples, seeds=seeds,
                          out_dir=args.out)
    print(ablation_table(report), end="")
    return 0


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    from .optim import NumericError

    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
