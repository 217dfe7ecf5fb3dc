"""Command-line surface: stats, weights, train, bench, verify.

Every subcommand that writes files treats --out as a directory, writes
its machine-readable outputs there, renders figures next to them (unless
--no-figures), and finishes by atomically writing a manifest.json that
records the resolved configuration, input digests, and output names —
enough to re-run the command bit-compatibly.

Exit codes: 0 success; 1 input error (missing/invalid data files);
2 configuration error (bad flags, unknown or inconsistent config keys);
3 acceptance failure (verify discrepancy at or above threshold).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .annotations import DatasetError, DetectionDataset, load_coco, load_jsonl
from .content_stats import (
    class_counts,
    export_weight_rows,
    fit_box_ratio_model,
    gap_report,
    inverse_frequency_weights,
    write_weights_csv,
)
from .trainer import CareConfig, ConfigError, bench, render_bench_table, train
from .verify import identity_report

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_CONFIG = 2
EXIT_ACCEPTANCE = 3

VERIFY_THRESHOLD = 1e-8

# Keys the bench config controls per row; the base block must not set them.
_BENCH_ROW_KEYS = ("method", "alignment", "use_class_rewt", "use_box_rewt")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_manifest(out_dir: Path, subcommand: str, config: dict, inputs: dict, outputs: list, seed) -> None:
    manifest = {
        "artifact_version": __version__,
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "inputs": {
            name: {"path": str(path), "sha256": _sha256_file(Path(path))}
            for name, path in inputs.items()
        },
        "outputs": sorted(outputs),
    }
    _atomic_write_text(out_dir / "manifest.json", _dump_json(manifest))


def _load_dataset(path_str: str, fmt: str, domain: str, clamp: bool) -> DetectionDataset:
    path = Path(path_str)
    if not path.exists():
        raise DatasetError(f"input file not found: {path}")
    if fmt == "auto":
        fmt = "jsonl" if path.suffix == ".jsonl" else "coco"
    if fmt == "coco":
        return load_coco(path, domain=domain, clamp=clamp)
    return load_jsonl(path, domain=domain, clamp=clamp)


def _maybe_figures(args, render, *render_args) -> list:
    if getattr(args, "no_figures", False):
        return []
    return render(*render_args)


def cmd_stats(args) -> int:
    source = _load_dataset(args.source, args.format, "source", args.clamp)
    target = _load_dataset(args.target, args.format, "target", args.clamp)
    report = gap_report(source, target)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = ["gap_report.json"]
    _atomic_write_text(out_dir / "gap_report.json", _dump_json(report))
    from .figures import render_stats_figures

    outputs += _maybe_figures(args, render_stats_figures, report, out_dir)
    _write_manifest(
        out_dir,
        "stats",
        {"source": args.source, "target": args.target, "format": args.format,
         "clamp": args.clamp, "no_figures": args.no_figures},
        {"source": args.source, "target": args.target},
        outputs,
        seed=None,
    )
    print(f"gap report written to {out_dir / 'gap_report.json'}")
    return EXIT_OK


def cmd_weights(args) -> int:
    source = _load_dataset(args.source, args.format, "source", args.clamp)
    target = _load_dataset(args.target, args.format, "target", args.clamp)
    rows_ds = target if args.domain == "target" else source
    weights = inverse_frequency_weights(class_counts(rows_ds), rows_ds.domain)
    model = fit_box_ratio_model(source, target)
    rows = export_weight_rows(rows_ds, weights, model, smoothed=not args.raw_ratio)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_weights_csv(rows, out_dir / "weights.csv")
    outputs = ["weights.csv"]
    from .figures import render_weights_figures

    if rows:
        outputs += _maybe_figures(args, render_weights_figures, rows, out_dir)
    _write_manifest(
        out_dir,
        "weights",
        {"source": args.source, "target": args.target, "format": args.format,
         "clamp": args.clamp, "domain": args.domain, "raw_ratio": args.raw_ratio,
         "no_figures": args.no_figures},
        {"source": args.source, "target": args.target},
        outputs,
        seed=None,
    )
    print(f"{len(rows)} weight rows written to {out_dir / 'weights.csv'}")
    return EXIT_OK


def _load_config_dict(path_str: str) -> dict:
    path = Path(path_str)
    if not path.exists():
        raise DatasetError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return raw


def cmd_train(args) -> int:
    raw = _load_config_dict(args.config)
    config = CareConfig.from_dict(raw)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    report = train(config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_dict = report.to_dict(include_history=True)
    _atomic_write_text(out_dir / "train_report.json", _dump_json(report_dict))
    outputs = ["train_report.json"]
    from .figures import render_train_figures

    outputs += _maybe_figures(args, render_train_figures, report_dict, out_dir)
    _write_manifest(
        out_dir,
        "train",
        {"config": config.to_dict(), "config_path": args.config, "no_figures": args.no_figures},
        {"config": args.config},
        outputs,
        seed=config.seed,
    )
    m = report.metrics
    print(
        f"method={config.method} seed={config.seed} "
        f"balanced_accuracy={m['balanced_accuracy']:.4f} "
        f"overall_accuracy={m['overall_accuracy']:.4f} "
        f"box_error={m['mean_box_smooth_l1']:.5f}"
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    raw = _load_config_dict(args.config)
    if "seeds" not in raw:
        raise ConfigError("bench config requires a 'seeds' list")
    seeds = raw.pop("seeds")
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("'seeds' must be a non-empty list of integers")
    for key in _BENCH_ROW_KEYS:
        if key in raw:
            raise ConfigError(f"bench config does not accept {key!r}: the grid rows control it")
    base = CareConfig.from_dict(raw)
    result = bench(base, seeds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = render_bench_table(result)
    _atomic_write_text(out_dir / "bench.json", _dump_json(result))
    _atomic_write_text(out_dir / "bench.txt", table)
    outputs = ["bench.json", "bench.txt"]
    from .figures import render_bench_figures

    outputs += _maybe_figures(args, render_bench_figures, result, out_dir)
    _write_manifest(
        out_dir,
        "bench",
        {"base_config": base.to_dict(), "seeds": result["seeds"], "config_path": args.config,
         "no_figures": args.no_figures},
        {"config": args.config},
        outputs,
        seed=None,
    )
    print(table, end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    report = identity_report(args.trials, args.seed, max_support=args.max_support)
    text = _dump_json(report)
    print(text, end="")
    if args.out is not None:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(out_dir / "verify_report.json", text)
        outputs = ["verify_report.json"]
        from .figures import render_verify_figures

        outputs += _maybe_figures(args, render_verify_figures, report, out_dir)
        _write_manifest(
            out_dir,
            "verify",
            {"trials": args.trials, "seed": args.seed, "max_support": args.max_support,
             "no_figures": args.no_figures},
            {},
            outputs,
            seed=args.seed,
        )
    worst = max(report["max_discrepancy"], report["max_forced_discrepancy"])
    if worst >= VERIFY_THRESHOLD:
        print(
            f"identity check FAILED: discrepancy {worst:.3e} >= {VERIFY_THRESHOLD:.0e}",
            file=sys.stderr,
        )
        return EXIT_ACCEPTANCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="care",
        description="Conditional alignment and reweighting for sim2real adaptation: "
        "dataset gap statistics, importance weights, training, ablation bench, "
        "and exact identity verification.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_io(p):
        p.add_argument("--source", required=True, help="source-domain annotation file")
        p.add_argument("--target", required=True, help="target-domain annotation file")
        p.add_argument("--format", choices=("auto", "coco", "jsonl"), default="auto",
                       help="annotation format for both inputs (auto: by extension)")
        p.add_argument("--clamp", action="store_true",
                       help="clip slightly out-of-bounds boxes instead of rejecting them")

    def add_figures(p):
        p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p = sub.add_parser("stats", help="content-gap report between two datasets")
    add_io(p)
    p.add_argument("--out", required=True, help="output directory")
    add_figures(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("weights", help="per-annotation importance weights as CSV")
    add_io(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--raw-ratio", action="store_true",
                   help="export the raw density ratio instead of the bounded form")
    p.add_argument("--domain", choices=("source", "target"), default="target",
                   help="which domain's annotations become CSV rows")
    add_figures(p)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("train", help="train one configuration on the toy task")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    add_figures(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="run the fixed six-row ablation grid")
    p.add_argument("--config", required=True, help="JSON config file with a 'seeds' list")
    p.add_argument("--out", required=True, help="output directory")
    add_figures(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="exact finite-support check of the reweighting identity")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-support", type=int, default=4,
                   help="largest support size per axis")
    p.add_argument("--out", default=None, help="optional output directory")
    add_figures(p)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DatasetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
