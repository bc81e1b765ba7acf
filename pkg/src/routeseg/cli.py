"""Command-line entry point.

Verbs: gen-data, train, eval, ablate-topk, ablate-components, cross-eval,
grad-check, route-stats, plot. Exit codes: 0 success, 1 usage error,
2 runtime error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; the CLI contract is 1
        raise _UsageError(message)


def _write_manifest(out_dir: Path, command: str, files: list[str], extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "files": sorted(files), **extra}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _load_run_config(args) -> "RunConfig":
    from .harness import RunConfig

    if args.config:
        cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="routeseg", description="Expert-routing referring segmentation harness")
    parser.add_argument("--version", action="version", version=f"routeseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--dialect", default="spatial", choices=["spatial", "appearance", "relational"])
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--size", type=int, default=2000)
    p.add_argument("--image-size", type=int, default=64)

    sub.add_parser("train", parents=[common], help="train a model from a run config")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k-override", type=int, default=None)

    p = sub.add_parser("ablate-topk", parents=[common], help="Top-K ablation table")
    p.add_argument("--k-set", default="1,2,3,4")
    p.add_argument("--seeds", default="0,1,2")

    p = sub.add_parser("ablate-components", parents=[common], help="component ablation table")
    p.add_argument("--seeds", default="0,1,2")

    p = sub.add_parser("cross-eval", parents=[common], help="zero-shot dialect transfer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", action="append", required=True, metavar="DIALECT=PATH")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient audit")
    p.add_argument("--components", default=None, help="comma list; default: all")
    p.add_argument("--threshold", type=float, default=1e-4)

    p = sub.add_parser("route-stats", parents=[common], help="routing statistics CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("plot", parents=[common], help="render SVG artifacts")
    p.add_argument("inputs", nargs="+")
    return parser


def _cmd_gen_data(args) -> int:
    from .data import DatasetConfig, generate_dataset, write_dataset

    out = Path(args.out or f"data/{args.dialect}_{args.split}")
    cfg = DatasetConfig(
        dialect=args.dialect,
        split=args.split,
        size=args.size,
        image_size=args.image_size,
        seed=args.seed if args.seed is not None else 0,
    )
    ds = generate_dataset(cfg)
    write_dataset(ds, out)
    print(f"wrote {len(ds)} samples to {out} (config hash {cfg.hash()[:12]})")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .harness import train

    cfg = _load_run_config(args)
    report = train(cfg)
    print(json.dumps({"final_val_miou": report.final_val_miou, "best_val_miou": report.best_val_miou}))
    _write_manifest(
        Path(cfg.out_dir),
        "train",
        ["report.json", "config.json", "best.ckpt", "last.ckpt", "routing_stats.csv"],
        {"config_hash": cfg.config_hash(), "seed": cfg.seed},
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness import evaluate

    out = args.out or "eval_out"
    report = evaluate(args.checkpoint, args.data, k_override=args.k_override, out_dir=out)
    print(json.dumps({"mIoU": report["mIoU"], "oIoU": report["oIoU"], "split": report["split"]}))
    _write_manifest(Path(out), "eval", ["eval.json", "routing_stats.csv"], {})
    return EXIT_OK


def _cmd_ablate_topk(args) -> int:
    from .harness import ablate_topk

    cfg = _load_run_config(args)
    k_set = [int(v) for v in args.k_set.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    rows = ablate_topk(cfg, k_set, seeds)
    print(json.dumps(rows, indent=1))
    _write_manifest(Path(cfg.out_dir), "ablate-topk", ["ablation_topk.csv"], {"k_set": k_set, "seeds": seeds})
    return EXIT_OK


def _cmd_ablate_components(args) -> int:
    from .harness import ablate_components

    cfg = _load_run_config(args)
    seeds = [int(v) for v in args.seeds.split(",")]
    rows = ablate_components(cfg, seeds)
    print(json.dumps(rows, indent=1))
    _write_manifest(Path(cfg.out_dir), "ablate-components", ["ablation_components.csv"], {"seeds": seeds})
    return EXIT_OK


def _cmd_cross_eval(args) -> int:
    from .harness import cross_dialect_eval

    paths = {}
    for spec in args.data:
        if "=" not in spec:
            raise _UsageError(f"--data expects DIALECT=PATH, got {spec!r}")
        dialect, path = spec.split("=", 1)
        paths[dialect] = path
    out = args.out or "cross_eval_out"
    result = cross_dialect_eval(args.checkpoint, paths, out_dir=out)
    print(json.dumps(result["transfer"], indent=1, sort_keys=True))
    _write_manifest(Path(out), "cross-eval", ["cross_dialect.json"], {})
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    from .harness import grad_check_all

    components = args.components.split(",") if args.components else None
    results = grad_check_all(components)
    worst = max(results.values())
    for name in sorted(results):
        status = "PASS" if results[name] <= args.threshold else "FAIL"
        print(f"{name:28s} {results[name]:.3e}  {status}")
    if args.out:
        _write_manifest(Path(args.out), "grad-check", [], {"results": results})
        (Path(args.out) / "grad_check.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    if worst > args.threshold:
        print(f"worst relative error {worst:.3e} exceeds {args.threshold:g}", file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


def _cmd_route_stats(args) -> int:
    from .harness import evaluate_model
    from .data import read_dataset
    from .model import load_checkpoint
    from .routing import write_routing_stats_csv

    model, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    _, stats = evaluate_model(model, ds)
    if stats is None:
        print("model has no routed component; nothing to report", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out or "route_stats_out")
    out.mkdir(parents=True, exist_ok=True)
    write_routing_stats_csv(stats, out / "routing_stats.csv")
    print(f"wrote {out / 'routing_stats.csv'} over {stats.n_samples} samples")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plots import plot_any

    out = args.out or "plots"
    written = []
    for item in args.inputs:
        written.extend(plot_any(item, out))
    for path in written:
        print(path)
    _write_manifest(Path(out), "plot", written, {})
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate-topk": _cmd_ablate_topk,
    "ablate-components": _cmd_ablate_components,
    "cross-eval": _cmd_cross_eval,
    "grad-check": _cmd_grad_check,
    "route-stats": _cmd_route_stats,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
