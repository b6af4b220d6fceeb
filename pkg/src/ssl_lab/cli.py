"""Command line entry point: ``ssl-lab <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 comparison mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as D
from . import evaluate as E
from . import model as M
from . import train as TR

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_MISMATCH = 0, 2, 3, 4
SEED_ENV = "SSL_LAB_SEED"

PRESETS = {
    "fig2": {
        "base": {"mode": "supervised"},
        # 200/class is every anatomical training image of the default dataset
        "axes": {"labelled_per_class": [1, 5, 20, 50, 100, 200], "include_background": [False, True]},
    },
    "fig3": {
        "base": {},
        "axes": {"labelled_per_class": [5, 20, 50], "include_background": [True, False], "mode": ["supervised", "ssl"]},
    },
    "table1": {
        "base": {"mode": "ssl", "labelled_per_class": 20, "include_background": False},
        "axes": {"cardiac_threshold": [0.75, 0.375, 0.25, 0.1875, "disabled"]},
    },
    "table2": {
        "base": {"mode": "ssl", "labelled_per_class": 20, "include_background": False},
        "axes": {"optimizer": ["adam", "momentum", "sgd_cyclic"], "tsa_schedule": ["linear", "log"]},
    },
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, width=100, max_help_position=32)


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}", EXIT_CONFIG) from None


def build_parser(seed_default: int = 0) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssl-lab",
        description="Semi-supervised classification experiments on a synthetic imbalanced dataset.",
        formatter_class=_Formatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)
        p.add_argument("--seed", type=int, default=seed_default, help=f"random seed (env {SEED_ENV} sets the default)")
        p.add_argument("--out", type=Path, default=Path(f"out/{name}"), help="output directory")
        return p

    p = add("gen-data", "generate the synthetic dataset")
    p.add_argument("--spec", type=Path, default=None, help="JSON dataset spec; flags below override it")
    p.add_argument("--train-per-class", type=int, default=None, help="training images per anatomical class (spec default 200)")
    p.add_argument("--test-per-class", type=int, default=None, help="test images per anatomical class (spec default 60)")
    p.add_argument("--no-background", action="store_true", help="omit the background class")

    p = add("train", "train one model")
    p.add_argument("--config", type=Path, default=None, help="JSON run config; omitted fields take built-in defaults")
    p.add_argument("--data", type=Path, default=Path("out/gen-data"), help="dataset directory")
    p.add_argument("--mode", choices=("supervised", "ssl"), default=None, help="override the config's mode")
    p.add_argument("--lambda", dest="lambda_", metavar="LAMBDA", type=float, default=None, help="override the consistency weight")
    p.add_argument("--epochs", type=int, default=None, help="override the epoch count")
    p.add_argument("--labelled-per-class", type=int, default=None, help="override the label budget")
    p.add_argument("--no-background", action="store_true", help="drop the background class before training")

    p = add("evaluate", "evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint written by train")
    p.add_argument("--data", type=Path, default=Path("out/gen-data"), help="dataset directory")
    p.add_argument("--no-background", action="store_true", help="evaluate without the background class")

    p = add("grid", "run an experiment grid")
    p.add_argument("--preset", choices=sorted(PRESETS), default="fig3", help="experiment grid")
    p.add_argument("--config", type=Path, default=None, help="base JSON run config for every grid point")
    p.add_argument("--data", type=Path, default=Path("out/gen-data"), help="dataset directory")
    p.add_argument("--replicates", type=int, default=3, help="seeds per grid point")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--no-background", action="store_true", help="keep only the no-background grid points")

    p = add("compare", "tabulate SSL minus supervised deltas over finished runs")
    p.add_argument("runs", type=Path, nargs="+", help="run directories or grid directories holding runs/")

    p = add("report", "render summaries and SVG figures for finished runs")
    p.add_argument("runs", type=Path, nargs="+", help="run directories or grid directories holding runs/")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def read_json(path: Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_CONFIG) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}", EXIT_CONFIG) from None
    if not isinstance(doc, dict):
        raise CliError(f"{path}: top level must be a JSON object", EXIT_CONFIG)
    return doc


def load_config(path: Path | None, seed: int, base: dict | None = None, **overrides) -> TR.TrainConfig:
    """Defaults, then ``base`` (a preset), then the config file, then flag overrides."""
    doc = TR.TrainConfig().to_dict()
    doc.update(base or {})
    if path is not None:
        user = read_json(path)
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(doc.get(key), dict) and key != "optimizer":
                doc[key] = {**doc[key], **value}
            else:
                doc[key] = value
    doc["seed"] = seed
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "lambda":
            doc["ssl"]["lambda"] = value
        else:
            doc[key] = value
    try:
        return TR.TrainConfig.from_dict(doc)
    except (TR.ConfigError, ValueError, TypeError) as exc:
        where = f"{path}: " if path is not None else ""
        raise CliError(f"{where}{exc}", EXIT_CONFIG) from None


def load_dataset(path: Path) -> D.Dataset:
    try:
        return D.load(path)
    except D.DatasetFormatError as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from None


def collect_runs(paths) -> list[Path]:
    dirs = []
    for p in paths:
        p = Path(p)
        if (p / "record.json").exists():
            dirs.append(p)
        elif (p / "runs").is_dir():
            dirs.extend(sorted(d for d in (p / "runs").iterdir() if (d / "record.json").exists()))
        else:
            raise CliError(f"{p}: no record.json and no runs/ directory", EXIT_RUNTIME)
    return dirs


def class_table(ds: D.Dataset) -> str:
    train, test = ds.train.class_counts(), ds.test.class_counts()
    width = max(len(n) for n in ds.class_names)
    lines = [f"{'class':<{width}}  {'train':>6}  {'test':>6}"]
    lines += [f"{n:<{width}}  {train[n]:>6}  {test[n]:>6}" for n in ds.class_names]
    lines.append(f"{'total':<{width}}  {sum(train.values()):>6}  {sum(test.values()):>6}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    fields = read_json(args.spec) if args.spec else {}
    fields["seed"] = args.seed
    if args.train_per_class is not None:
        fields["train_per_class"] = args.train_per_class
    if args.test_per_class is not None:
        fields["test_per_class"] = args.test_per_class
    if args.no_background:
        fields["include_background"] = False
    for key in ("image_size",):
        if key in fields:
            fields[key] = tuple(fields[key])
    if "images_per_class" in fields:
        fields["images_per_class"] = {k: tuple(v) for k, v in fields["images_per_class"].items()}
    try:
        spec = D.DatasetSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise CliError(f"dataset spec: {exc}", EXIT_CONFIG) from None
    ds = D.generate(spec)
    D.save(args.out, ds)
    print(class_table(ds))
    print(f"wrote {len(ds)} images to {args.out} (test hash {ds.test.content_hash()})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(
        args.config, args.seed, mode=args.mode, epochs=args.epochs,
        labelled_per_class=args.labelled_per_class, **{"lambda": args.lambda_},
    )
    if args.no_background:
        cfg = cfg.replace(include_background=False)
    ds = load_dataset(args.data)
    try:
        record, _ = TR.run(cfg, ds, out_dir=args.out, progress=print)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from None
    if record.status != "ok":
        print(f"run failed: {record.error}", file=sys.stderr)
        return EXIT_RUNTIME
    r = record.report
    print(f"overall {r.overall_accuracy_anatomical:.4f}  grouped {r.grouped_cluster_accuracy:.4f}  -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        params = M.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {exc}", EXIT_RUNTIME) from None
    ds = load_dataset(args.data)
    test_hash = ds.test.content_hash()
    if args.no_background:
        ds = ds.without_background()
    if ds.num_classes != params.config.num_classes:
        raise CliError(
            f"checkpoint has {params.config.num_classes} classes, dataset has {ds.num_classes}"
            + ("" if args.no_background else " (try --no-background)"),
            EXIT_RUNTIME,
        )
    report = E.evaluate(params, ds.test, test_hash=test_hash)
    E.export(report, None, args.out)
    print(f"overall {report.overall_accuracy_anatomical:.4f}  grouped {report.grouped_cluster_accuracy:.4f}  -> {args.out}")
    return EXIT_OK


def cmd_grid(args) -> int:
    preset = PRESETS[args.preset]
    base = load_config(args.config, args.seed, base=preset["base"])
    axes = {k: list(v) for k, v in preset["axes"].items()}
    if args.no_background:
        if "include_background" in axes:
            axes["include_background"] = [False]
        base = base.replace(include_background=False)
    if args.replicates < 1 or args.jobs < 1:
        raise CliError("--replicates and --jobs must be positive", EXIT_CONFIG)
    ds = load_dataset(args.data)
    records = TR.run_grid(base, axes, ds, args.out, replicates=args.replicates, jobs=args.jobs, progress=print)
    failed = [r for r in records if r.status != "ok"]
    try:
        rows = E.compare(records)
    except E.ComparisonError as exc:
        rows = []
        print(f"no comparison: {exc}")
    if rows:
        E.write_comparison_csv(rows, Path(args.out) / "comparison.csv")
        print(E.format_comparison(rows))
    print(f"{len(records) - len(failed)}/{len(records)} runs completed -> {args.out}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_compare(args) -> int:
    records = [TR.RunRecord.load(d) for d in collect_runs(args.runs)]
    try:
        rows = E.compare(records)
    except E.ComparisonError as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from None
    args.out.mkdir(parents=True, exist_ok=True)
    E.write_comparison_csv(rows, args.out / "comparison.csv")
    print(E.format_comparison(rows))
    return EXIT_OK


def cmd_report(args) -> int:
    runs = collect_runs(args.runs)
    groups = []
    for d in runs:
        rec = TR.RunRecord.load(d)
        if rec.report is None:
            continue
        E.export(rec.report, rec, args.out / d.name)
        groups.append((d.name, [("overall", rec.report.overall_accuracy_anatomical),
                                ("grouped", rec.report.grouped_cluster_accuracy)]))
    if not groups:
        raise CliError("no completed runs to report", EXIT_RUNTIME)
    (args.out / "runs_accuracy.svg").write_text(E.bars_svg(groups, "accuracy per run"))
    print(f"rendered {len(groups)} run(s) -> {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        parser = build_parser(default_seed())
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, matching the config-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
