"""Command-line entry point: one subcommand per pipeline stage, JSON
summaries on stdout, and exit codes 0 (ok), 1 (usage), 2 (data error),
3 (numeric divergence)."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__, balance, hcbnet, patchex, pipeline, synth
from .errors import ConfigError, DataError, DivergenceError
from .manifest import (DEFAULT_NAME_PATTERN, FoldPlan, Manifest,
                       apply_paper_filters, hierarchy_stats, ingest_dataset,
                       make_folds, split_fold)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; remap to this package's convention."""

    def error(self, message):
        raise _UsageError(message)


def _emit(summary):
    print(json.dumps(summary, sort_keys=True))


def _error_record(kind, message):
    print(json.dumps({"error": kind, "message": str(message)}),
          file=sys.stderr)


def build_parser():
    parser = _Parser(prog="camid", description=__doc__)
    parser.add_argument("--version", action="store_true",
                        help="print the package version as JSON and exit")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads; 1 is bitwise reproducible")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("scan", help="ingest a dataset tree into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--pattern", default=DEFAULT_NAME_PATTERN)
    p.add_argument("--out", required=True)
    p.add_argument("--no-filters", action="store_true",
                   help="skip the >=2-device filter and model merge")

    p = sub.add_parser("folds", help="plan leave-one-device-out folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-folds", type=int, required=True)
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract", help="select patches into a cache file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-count", type=int, required=True)
    p.add_argument("--thresholds", type=float, nargs=2,
                   default=[patchex.STD_SATURATED, patchex.STD_HOMOGENEOUS],
                   metavar=("LO", "HI"))
    p.add_argument("--size", type=int, default=patchex.PATCH_SIZE)
    p.add_argument("--stride", type=int, default=patchex.PATCH_STRIDE)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("balance", help="compute the hierarchical quota chain")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--folds")
    p.add_argument("--fold", type=int)
    p.add_argument("--out")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--spec", default="default",
                   help="'default' or a synth spec JSON path")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train folds from a run config")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="evaluate fold checkpoints")
    p.add_argument("--config", required=True)

    p = sub.add_parser("predict", help="predict one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--patch-count", type=int, default=200)

    p = sub.add_parser("count-params", help="count trainable parameters")
    p.add_argument("--spec", required=True)
    return parser


# -- run config -----------------------------------------------------------------

_RUN_KEYS = {"manifest", "folds", "cache", "network_spec", "output_dir",
             "train", "folds_to_run"}

# environment overrides, mainly for relocating large artifacts in CI
ENV_CACHE = "CAMID_CACHE"
ENV_OUTPUT_DIR = "CAMID_OUTPUT_DIR"


def load_run_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load run config {path}: {e}") from e
    unknown = set(raw) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    if os.environ.get(ENV_CACHE):
        raw["cache"] = os.environ[ENV_CACHE]
    if os.environ.get(ENV_OUTPUT_DIR):
        raw["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    for key in ("manifest", "folds", "cache", "network_spec", "output_dir"):
        if key not in raw:
            raise ConfigError(f"run config missing key {key!r}")
    cfg = pipeline.TrainConfig.from_dict(raw.get("train", {}))
    return raw, cfg


def _cmd_scan(args):
    m, report = ingest_dataset(args.root, args.pattern)
    if not args.no_filters:
        m = apply_paper_filters(m)
    m.save(args.out)
    stats = hierarchy_stats(m)
    return {"command": "scan", "out": args.out,
            "records": len(m), "skipped": report.to_dict(),
            "totals": stats["totals"]}


def _cmd_folds(args):
    m = Manifest.load(args.manifest)
    plan = make_folds(m, args.n_folds, val_fraction=args.val_fraction,
                      seed=args.seed)
    plan.save(args.out)
    return {"command": "folds", "out": args.out, "n_folds": plan.n_folds,
            "held_out_per_fold": len(plan.assignments[0])}


def _cmd_extract(args):
    m = Manifest.load(args.manifest)
    lo, hi = args.thresholds
    entries = patchex.extract_to_cache(
        m.records, args.out, p=args.patch_count, seed=args.seed,
        size=args.size, stride=args.stride, lo=lo, hi=hi,
        threads=args.threads)
    counts = [0, 0, 0]
    total = 0
    for sel in entries.values():
        for i in range(3):
            counts[i] += sel.counts[i]
        total += len(sel.patches)
    return {"command": "extract", "out": args.out, "images": len(entries),
            "patches": total,
            "used": {"homogeneous": counts[0], "nonhomogeneous": counts[1],
                     "saturated": counts[2]}}


def _cmd_balance(args):
    m = Manifest.load(args.manifest)
    records = m.records
    if (args.folds is None) != (args.fold is None):
        raise ConfigError("--folds and --fold must be given together")
    if args.folds is not None:
        plan = FoldPlan.load(args.folds)
        records, _, _ = split_fold(m, plan, args.fold)
    sampling = balance.plan_counts(records, args.k)
    if args.out:
        sampling.save(args.out)
    d = sampling.to_dict()
    return {"command": "balance", "k": sampling.k,
            "k_brand": sampling.k_brand, "k_model": d["k_model"],
            "k_device": d["k_device"], "total_quota": sampling.total_quota,
            "out": args.out}


def _cmd_synth(args):
    spec = (synth.SynthSpec() if args.spec == "default"
            else synth.SynthSpec.load(args.spec))
    out_dir = Path(args.out)
    m = synth.generate(spec, out_dir)
    spec.save(out_dir / "synth_spec.json")
    return {"command": "synth", "out": str(out_dir), "images": len(m),
            "brands": len(spec.brands),
            "models": len(spec.pairs())}


def _cmd_train(args):
    raw, cfg = load_run_config(args.config)
    m = Manifest.load(raw["manifest"])
    plan = FoldPlan.load(raw["folds"])
    spec = hcbnet.NetworkSpec.load(raw["network_spec"])
    cache = patchex.PatchCache(raw["cache"])
    out_dir = Path(raw["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = raw.get("folds_to_run") or list(range(plan.n_folds))
    results = {}
    for fold in folds:
        ckpt = out_dir / f"fold{fold}.ckpt"
        res = pipeline.train_fold(m, plan, fold, spec, cfg, cache, ckpt)
        (out_dir / f"fold{fold}_history.json").write_text(
            json.dumps(res.history, indent=1, sort_keys=True))
        results[str(fold)] = {
            "checkpoint": res.checkpoint_path,
            "best_epoch": res.best_epoch,
            "best_val_accuracy": res.best_val_accuracy,
        }
    return {"command": "train", "output_dir": str(out_dir),
            "config_hash": spec.spec_hash(), "seed": cfg.seed,
            "train_config": cfg.to_dict(), "folds": results}


def _cmd_eval(args):
    raw, cfg = load_run_config(args.config)
    m = Manifest.load(raw["manifest"])
    plan = FoldPlan.load(raw["folds"])
    out_dir = Path(raw["output_dir"])
    ckpts = [out_dir / f"fold{f}.ckpt" for f in range(plan.n_folds)]
    for c in ckpts:
        if not c.exists():
            raise DataError(f"missing checkpoint {c}")
    report = pipeline.evaluate_folds(ckpts, m, plan, cfg)
    report.save_json(out_dir / "report.json")
    report.save_csv(out_dir / "report.csv")
    label = hcbnet.NetworkSpec.load(raw["network_spec"]).head
    print(pipeline.format_fold_table({label: report}), file=sys.stderr)
    return {"command": "eval", "output_dir": str(out_dir),
            "fold_accuracies": report.fold_accuracies,
            "mean_accuracy": report.mean_accuracy,
            "std_accuracy": report.std_accuracy,
            "report_json": str(out_dir / "report.json"),
            "report_csv": str(out_dir / "report.csv")}


def _cmd_predict(args):
    pred = pipeline.predict_image(args.checkpoint, args.image,
                                  p=args.patch_count)
    return {"command": "predict", "image": args.image, "brand": pred.brand,
            "model": pred.model, "brand_tally": pred.brand_tally,
            "model_tally": pred.model_tally}


def _cmd_count_params(args):
    spec = hcbnet.NetworkSpec.load(args.spec)
    net = hcbnet.build_network(spec, seed=0)
    return {"command": "count-params", "spec": args.spec,
            "count": hcbnet.count_params(net)}


_COMMANDS = {
    "scan": _cmd_scan,
    "folds": _cmd_folds,
    "extract": _cmd_extract,
    "balance": _cmd_balance,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "count-params": _cmd_count_params,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            _emit({"version": __version__})
            return EXIT_OK
        if args.command is None:
            raise _UsageError("a subcommand is required")
        summary = _COMMANDS[args.command](args)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        _error_record("usage", e)
        return EXIT_USAGE
    except ConfigError as e:
        _error_record("config", e)
        return EXIT_USAGE
    except DivergenceError as e:
        _error_record("divergence", e)
        return EXIT_DIVERGED
    except DataError as e:
        _error_record("data", e)
        return EXIT_DATA
    summary.setdefault("version", __version__)
    _emit(summary)
    return EXIT_OK


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
