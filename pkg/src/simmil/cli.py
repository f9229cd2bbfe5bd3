"""Command-line entry point: ``simmil <command> [flags]``.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage or
configuration error.  Every command writes ``manifest.json`` under ``--out``
recording the command, config fingerprint, seed and artifact hashes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path

from . import config as config_mod
from . import pipeline
from .bags import read_dataset, write_dataset
from .config import ExperimentConfig
from .errors import ConfigError, ContractError, FormatError
from .gradsuite import TOLERANCE, run_checks
from .metrics import Report
from .numeric import checkpoint as ck

log = logging.getLogger("simmil")

MANIFEST = "manifest.json"
COMMANDS = ("synth-bags", "pretrain", "pretrain-survival", "pretrain-contrastive", "continue",
            "extract", "train-agg", "eval-instance", "gradcheck", "report")


class UsageError(Exception):
    """Bad flags or missing inputs detected after argument parsing."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simmil", description="Label-propagation MIL pretraining on synthetic bags.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, *flags):
        p.add_argument("--config", type=Path, help="INI config applied on top of the preset")
        p.add_argument("--preset", default="desk", help=f"base preset ({', '.join(config_mod.PRESETS)})")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        for flag in flags:
            p.add_argument(f"--{flag}", required=flag != "agg",
                           type=str if flag == "agg" else Path)
        return p

    common(sub.add_parser("synth-bags", help="generate train/test synthetic bag datasets"))
    for name in ("pretrain", "pretrain-survival", "pretrain-contrastive"):
        common(sub.add_parser(name, help=f"{name.replace('-', ' ')} an extractor"), "data")
    common(sub.add_parser("continue", help="continue label-propagation training from a checkpoint"),
           "data", "ckpt")
    common(sub.add_parser("extract", help="cache frozen features for every split"), "data", "ckpt")
    common(sub.add_parser("train-agg", help="train a MIL aggregator on cached features"), "features", "agg")
    p = common(sub.add_parser("eval-instance", help="instance-level linear probe or fine-tune"), "data", "ckpt")
    p.add_argument("--mode", choices=("linear_probe", "finetune"), default="linear_probe")
    p.add_argument("--epochs", type=int, default=10)
    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable component")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p = sub.add_parser("report", help="aggregate run directories into CSV and JSON tables")
    p.add_argument("runs", nargs="+", type=Path, help="run directories holding manifest.json")
    p.add_argument("--out", type=Path, required=True)
    return parser


# -- helpers -----------------------------------------------------------------
def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _artifact_hashes(out: Path) -> dict[str, str]:
    return {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != MANIFEST}


def write_manifest(out: Path, command: str, fingerprint: str, seed, **extra) -> Path:
    body = {"command": command, "fingerprint": fingerprint, "seed": seed,
            "artifacts": _artifact_hashes(out), **extra}
    path = out / MANIFEST
    path.write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def _read_manifest(directory: Path) -> dict:
    path = directory / MANIFEST
    if not path.is_file():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None


def load_config(args) -> ExperimentConfig:
    cfg = config_mod.preset(args.preset)
    if args.config is not None:
        cfg = config_mod.load(args.config, base=cfg)
    if args.seed is not None:
        cfg = cfg.with_values(experiment={"seed": args.seed})
    return cfg


def _split_dirs(data: Path) -> dict[str, Path]:
    """Named dataset directories under ``data`` (``train``/``test``), or ``data`` itself."""
    if (data / "dataset.json").is_file():
        return {data.name: data}
    found = {name: data / name for name in ("train", "test") if (data / name / "dataset.json").is_file()}
    if not found:
        raise UsageError(f"{data} holds no dataset (expected dataset.json or train/ and test/)")
    return found


def _train_dir(data: Path) -> Path:
    dirs = _split_dirs(data)
    return dirs.get("train", next(iter(dirs.values())))


def _checkpoint(path: Path):
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    return ck.load(path)


def _checkpoint_config(ckpt) -> ExperimentConfig:
    try:
        return config_mod.from_text(ckpt.config_text, source="checkpoint config")
    except ConfigError:
        return ExperimentConfig()


# -- commands ------------------------------------------------------------------
def cmd_synth_bags(args, cfg: ExperimentConfig) -> None:
    train, test = pipeline.synthesize_splits(cfg)
    write_dataset(train, args.out / "train")
    write_dataset(test, args.out / "test")
    (args.out / "config.ini").write_text(cfg.canonical(), encoding="utf-8")
    write_manifest(args.out, "synth-bags", cfg.fingerprint().hex(), cfg.seed,
                   dataset=cfg.experiment.name, train_bags=len(train.bags), test_bags=len(test.bags))


def _pretrain_with(method: str | None):
    def run(args, cfg: ExperimentConfig) -> None:
        if method is not None:
            updates = {"method": method}
            if method == "simmil_survival":
                updates["task"] = "survival"
            cfg = cfg.with_values(experiment=updates)
        # pretraining never sees true instance labels
        dataset = read_dataset(_train_dir(args.data), with_truth=False)
        ckpt = pipeline.pretrain(cfg, dataset)
        ck.save(ckpt, args.out / "model.smck")
        write_manifest(args.out, args.command, ckpt.fingerprint.hex(), cfg.seed,
                       method=cfg.experiment.method, dataset=cfg.experiment.name,
                       diagnostics=_json_safe(ckpt.diagnostics))
    return run


def cmd_continue(args, cfg: ExperimentConfig) -> None:
    parent = _checkpoint(args.ckpt)
    dataset = read_dataset(_train_dir(args.data), with_truth=False)
    ckpt = pipeline.continue_pretrain(parent, cfg, dataset)
    ck.save(ckpt, args.out / "model.smck")
    write_manifest(args.out, "continue", ckpt.fingerprint.hex(), cfg.seed, method=cfg.experiment.method,
                   dataset=cfg.experiment.name, parent=parent.fingerprint.hex(),
                   diagnostics=_json_safe(ckpt.diagnostics))


def cmd_extract(args, cfg: ExperimentConfig) -> None:
    ckpt = _checkpoint(args.ckpt)
    for name, directory in _split_dirs(args.data).items():
        cache = pipeline.extract_features(ckpt, read_dataset(directory, with_truth=False))
        cache.save(args.out / f"{name}.smfc")
    source = _checkpoint_config(ckpt)
    write_manifest(args.out, "extract", ckpt.fingerprint.hex(), source.seed,
                   method=source.experiment.method, dataset=source.experiment.name)


def cmd_train_agg(args, cfg: ExperimentConfig) -> None:
    features = args.features
    if features.is_dir():
        train_path, test_path = features / "train.smfc", features / "test.smfc"
        if not train_path.is_file():
            raise UsageError(f"{features} holds no train.smfc")
    else:
        train_path, test_path = features, features.with_name("test.smfc")
    cache = pipeline.FeatureCache.load(train_path)
    test = pipeline.FeatureCache.load(test_path) if test_path.is_file() and test_path != train_path else None
    agg = args.agg or cfg.downstream.aggregator
    if cache.is_survival:
        task = "survival"
    else:
        task = "subtyping" if cfg.experiment.task == "subtyping" else "classification"
    _, report = pipeline.train_aggregator(cache, agg, task, cfg.seed, cfg, test)
    source = _read_manifest(train_path.parent)
    report.info.update(method=source.get("method", "unknown"), dataset=source.get("dataset", "unknown"))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (args.out / "report.csv").write_text(report.to_csv(args.out.name), encoding="utf-8")
    write_manifest(args.out, "train-agg", cache.fingerprint.hex(), cfg.seed, aggregator=agg,
                   method=report.info["method"], dataset=report.info["dataset"], task=task)


def cmd_eval_instance(args, cfg: ExperimentConfig) -> None:
    ckpt = _checkpoint(args.ckpt)
    dirs = _split_dirs(args.data)
    dataset = read_dataset(dirs.get("test", next(iter(dirs.values()))), with_truth=True)
    report = pipeline.instance_eval(ckpt, dataset, args.mode, cfg.seed, epochs=args.epochs)
    source = _checkpoint_config(ckpt)
    report.info.update(method=source.experiment.method, dataset=source.experiment.name)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (args.out / "report.csv").write_text(report.to_csv(args.out.name), encoding="utf-8")
    write_manifest(args.out, "eval-instance", ckpt.fingerprint.hex(), cfg.seed, aggregator=args.mode,
                   method=source.experiment.method, dataset=source.experiment.name, task="instance")


def cmd_gradcheck(args, cfg=None) -> None:
    results = run_checks(args.trials, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    body = {"trials": args.trials, "tolerance": TOLERANCE, "max_relative_error": results}
    (args.out / "gradcheck.json").write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    write_manifest(args.out, "gradcheck", "", args.seed)
    for name, err in results.items():
        print(f"{name:14s} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    bad = sorted(k for k, v in results.items() if not v < TOLERANCE)
    if bad:
        raise ContractError(f"gradient check failed for {', '.join(bad)}")


def aggregate_runs(runs: list[Path]) -> tuple[list[dict], list[str]]:
    """Group run reports by (method, aggregator, dataset) into mean/std rows."""
    groups: dict[tuple, dict[str, list[float]]] = {}
    for run in runs:
        manifest = _read_manifest(run)
        if not manifest:
            raise UsageError(f"{run} holds no {MANIFEST}")
        path = run / "report.json"
        if not path.is_file():
            raise UsageError(f"{run} holds no report.json")
        report = Report.from_json(path.read_text(encoding="utf-8"))
        key = (str(manifest.get("method", "unknown")), str(manifest.get("aggregator", "unknown")),
               str(manifest.get("dataset", "unknown")))
        bucket = groups.setdefault(key, {})
        for seed_values in report.per_seed.values():
            for name, value in seed_values.items():
                bucket.setdefault(name, []).append(float(value))
    metrics = sorted({m for bucket in groups.values() for m in bucket})
    rows = []
    for key in sorted(groups):
        row = {"method": key[0], "aggregator": key[1], "dataset": key[2]}
        for name in metrics:
            values = groups[key].get(name)
            if values:
                mean, std = Report.summarize(values)
                row[f"{name}_mean"], row[f"{name}_std"], row[f"{name}_n"] = mean, std, len(values)
            else:
                row[f"{name}_mean"] = row[f"{name}_std"] = row[f"{name}_n"] = None
        rows.append(row)
    return rows, metrics


def _cell(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_report(args, cfg=None) -> None:
    rows, metrics = aggregate_runs(args.runs)
    header = ["method", "aggregator", "dataset"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std", "n")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(row[h]) for h in header])
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    (args.out / "summary.json").write_text(json.dumps({"columns": header, "rows": rows}, indent=1) + "\n",
                                           encoding="utf-8")
    write_manifest(args.out, "report", "", None, runs=[str(r) for r in args.runs])
    sys.stdout.write(buf.getvalue())


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if hasattr(obj, "item"):
        return obj.item()
    return obj


HANDLERS = {
    "synth-bags": cmd_synth_bags,
    "pretrain": _pretrain_with(None),
    "pretrain-survival": _pretrain_with("simmil_survival"),
    "pretrain-contrastive": _pretrain_with("contrastive"),
    "continue": cmd_continue,
    "extract": cmd_extract,
    "train-agg": cmd_train_agg,
    "eval-instance": cmd_eval_instance,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"simmil: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args) if hasattr(args, "preset") else None
        config_mod.worker_count()
        args.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"simmil {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, FormatError, OSError, ValueError) as exc:
        print(f"simmil {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
