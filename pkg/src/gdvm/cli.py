"""``gdvm`` command line: train, sweep, eval, export-latent, bench-time, prepare-mnist."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import load_config, load_sweep
from .errors import GdvmError

log = logging.getLogger("gdvm")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load(args):
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seeds_override", None):
        changes["seeds"] = args.seeds_override
    if getattr(args, "out", None) and args.command in ("train", "sweep"):
        changes["out_dir"] = args.out
    return cfg.with_overrides(**changes) if changes else cfg


def cmd_train(args) -> int:
    from .harness import run_training

    cfg = _load(args)
    report = run_training(cfg)
    agg = report.aggregate()
    for name, stats in agg.items():
        if name.startswith("test_") or name.startswith("val_"):
            std = "n/a" if stats["std"] is None else f"{stats['std']:.4f}"
            print(f"{name}: {stats['mean']:.4f} ± {std} (n={stats['n']})")
    print(f"wrote {cfg.out_dir}")
    return 0


def cmd_sweep(args) -> int:
    from .harness import run_sweep

    if not args.sweep:
        raise SystemExit("sweep: --sweep is required")
    cfg = _load(args)
    result = run_sweep(cfg, load_sweep(args.sweep))
    best = result["best"]
    if best is None:
        print("every grid cell failed")
        return 3
    print(f"best: beta={best['beta']} epochs={best['epochs']} validation mean={best['mean']:.4f}")
    for name, stats in result.get("test_report", {}).get("aggregate", {}).items():
        print(f"{name}: {stats['mean']:.4f}")
    print(f"wrote {cfg.out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .harness import run_eval

    if not args.checkpoint:
        raise SystemExit("eval: --checkpoint is required")
    cfg = _load(args)
    modes = [m.strip() for m in args.mode.split(",") if m.strip()]
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval.json")
    report = run_eval(args.checkpoint, cfg, modes, out)
    for mode, per_split in report["modes"].items():
        for split_name, metrics in per_split.items():
            shown = ", ".join(f"{k}={v:.4f}" for k, v in metrics.items() if k not in ("loss", "predict_seconds"))
            print(f"{mode} {split_name}: {shown}")
    if "runtime_ratio" in report:
        print("runtime ratio vs first mode: " + json.dumps(report["runtime_ratio"]))
    print(f"wrote {out}")
    return 0


def cmd_export(args) -> int:
    from .harness import run_export_latent

    if not args.checkpoint or not args.out:
        raise SystemExit("export-latent: --checkpoint and --out are required")
    cfg = _load(args)
    n = run_export_latent(args.checkpoint, cfg, args.out, args.split)
    print(f"wrote {n} rows to {args.out}")
    return 0


def cmd_bench(args) -> int:
    from .harness import run_bench

    cfg = _load(args)
    out = args.out or os.path.join(cfg.out_dir, "timing.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    r = run_bench(cfg, epochs=args.epochs, warmup=args.warmup, out_path=out)
    print(f"baseline {r['baseline_us_per_image']:.1f} us/image, gdvm {r['gdvm_us_per_image']:.1f} us/image, "
          f"ratio {r['ratio']:.3f}")
    print(f"wrote {out}")
    return 0


def cmd_prepare_mnist(args) -> int:
    from .data import prepare_mnist

    images, labels = prepare_mnist(args.out or os.path.join("data", "mnist"))
    print(images)
    print(labels)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdvm", description="Gaussian latent-variable classifiers on numpy.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True):
        sp = sub.add_parser(name, help=help_text)
        if config:
            sp.add_argument("--config", required=True, help="run config (JSON)")
            sp.add_argument("--seeds-override", type=_seeds, help="comma-separated seeds replacing the config's")
        sp.set_defaults(func=fn)
        return sp

    add("train", cmd_train, "train one model per seed").add_argument("--out", help="output directory")
    sp = add("sweep", cmd_sweep, "beta x epochs validation sweep, then refit")
    sp.add_argument("--sweep", help="sweep grid (JSON)")
    sp.add_argument("--out", help="output directory")
    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--mode", default="deterministic",
                    help="deterministic, mc:N (prior draws), mcq:N (posterior draws); comma-separate to compare")
    sp.add_argument("--out", help="JSON report path")
    sp = add("export-latent", cmd_export, "write mu(x) coordinates and labels as CSV")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.add_argument("--split", default="all", choices=("all", "train", "val", "test"))
    sp = add("bench-time", cmd_bench, "per-image training time, baseline vs gdvm")
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--warmup", type=int, default=1)
    sp.add_argument("--out", help="JSON report path")
    sp = add("prepare-mnist", cmd_prepare_mnist, "write the bundled MNIST sample as IDX files", config=False)
    sp.add_argument("--out", help="target directory")
    return p


def exit_code(exc: BaseException) -> int:
    return getattr(exc, "exit_code", 1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GdvmError as exc:
        print(f"gdvm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"gdvm {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
