"""Command-line entry point.

Verbs mirror the pipeline stages::

    barlowtuple gen-data --preset desk --out data/desk
    barlowtuple pretrain --preset desk --seeds 0 1 2
    barlowtuple finetune --preset desk --modes all
    barlowtuple eval     --preset desk --modes all
    barlowtuple report   --preset desk
    barlowtuple run      --preset desk            # all of the above

Outputs live under ``<runs-dir>/<config hash>/``::

    config.json
    seed<s>/encoder.npz, seed<s>/pretrain_metrics.csv
    seed<s>/<mode>/segmenter.npz, metrics.csv, record.json
    report/table_miou.csv, concordance.csv, alignment_*.csv, records.json

Exit codes: 0 ok, 1 other failure, 2 config error, 3 data or I/O error,
4 numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import models as M
from .errors import BarlowTupleError, ConfigError, DataError, NumericError, UndefinedMetricError
from .experiment import MODES, ExperimentConfig, Pipeline, RunRecord, load_slides, metric_csv, summarize
from .metrics import parse_metric_csv
from .synth import build_dataset, save_dataset

log = logging.getLogger("barlowtuple")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------

def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    d[parts[-1]] = value


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or bare preset), then ``--set`` overrides, then flags."""
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    else:
        raw = {}
    if args.preset:
        raw["preset"] = args.preset
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass  # bare strings
        _set_dotted(raw, key, value)
    if args.seeds is not None:
        raw["seeds"] = list(args.seeds)
    if getattr(args, "manifest", None):
        raw["manifest"] = args.manifest
    return ExperimentConfig.from_dict(raw)


def run_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    root = Path(args.runs_dir) / config.hash()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return root


def _modes(selected: Sequence[str]) -> list[str]:
    if not selected or "all" in selected:
        return list(MODES)
    for m in selected:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}; choose from {', '.join(MODES)} or all")
    return list(selected)


def _progress(msg: str) -> None:
    log.info(msg)


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------

def cmd_gen_data(args, config: ExperimentConfig) -> None:
    out = Path(args.out) if args.out else Path(args.runs_dir) / "data" / config.hash()
    manifest = save_dataset(build_dataset(config.data), config.data, out)
    print(manifest)


def _pretrain(pipe: Pipeline, root: Path, seed: int) -> None:
    encoder, rows = pipe.run_pretrain(seed, _progress)
    d = root / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(d / "encoder.npz", encoder, {"encoder": M.config_dict(pipe.config.encoder)})
    (d / "pretrain_metrics.csv").write_text(metric_csv(rows))
    log.info("wrote %s", d / "encoder.npz")


def _load_encoder(root: Path, seed: int) -> M.Params:
    path = root / f"seed{seed}" / "encoder.npz"
    if not path.exists():
        raise DataError(f"no pretrained encoder at {path}; run the pretrain verb first")
    params, _ = M.load_checkpoint(path)
    return params


def _finetune(pipe: Pipeline, root: Path, seed: int, mode: str) -> None:
    encoder = _load_encoder(root, seed) if mode.startswith("pretrained") else None
    params, record = pipe.run_finetune(seed, mode, encoder, _progress)
    d = root / f"seed{seed}" / mode
    d.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(d / "segmenter.npz", params, {"encoder": M.config_dict(pipe.config.encoder), "mode": mode})
    _write_record(d, record)
    log.info("%s seed %d: selected epoch %d", mode, seed, record.selected_epoch)


def _write_record(d: Path, record: RunRecord) -> None:
    (d / "metrics.csv").write_text(metric_csv(record.metrics))
    (d / "record.json").write_text(json.dumps(record.to_json(), indent=2, sort_keys=True) + "\n")


def _read_record(d: Path) -> RunRecord:
    path = d / "record.json"
    if not path.exists():
        raise DataError(f"no run record at {path}; run the finetune verb first")
    rows = parse_metric_csv((d / "metrics.csv").read_text())
    return RunRecord.from_json(json.loads(path.read_text()), rows)


def _eval(pipe: Pipeline, root: Path, seed: int, mode: str) -> None:
    d = root / f"seed{seed}" / mode
    record = _read_record(d)
    if not (d / "segmenter.npz").exists():
        raise DataError(f"no segmenter checkpoint at {d / 'segmenter.npz'}")
    params, _ = M.load_checkpoint(d / "segmenter.npz")
    record.metrics = [r for r in record.metrics if r.epoch != -1]  # re-evaluation replaces old rows
    record.test_miou, record.concordance = {}, {}
    record = pipe.run_eval(params, record)
    _write_record(d, record)
    log.info("%s seed %d test mIoU %s", mode, seed, {k: round(v, 4) for k, v in record.test_miou.items()})


def cmd_report(args, config: ExperimentConfig, root: Path) -> None:
    records, pretrain_rows = [], []
    for seed in config.seeds:
        csv_path = root / f"seed{seed}" / "pretrain_metrics.csv"
        if csv_path.exists():
            pretrain_rows.extend(parse_metric_csv(csv_path.read_text()))
        for mode in MODES:
            d = root / f"seed{seed}" / mode
            if (d / "record.json").exists():
                records.append(_read_record(d))
    if not records:
        raise DataError(f"no run records under {root}")
    out = root / "report"
    out.mkdir(exist_ok=True)
    for name, text in summarize(records, pretrain_rows).items():
        (out / name).write_text(text)
    print(out)


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="barlowtuple", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--preset", choices=("paper", "desk"), help="base parameter set (default: paper)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, dotted keys and JSON values, e.g. pretrain.epochs=5")
    common.add_argument("--seeds", type=int, nargs="+", help="seed list (overrides the config)")
    common.add_argument("--manifest", help="dataset manifest written by gen-data")
    common.add_argument("--runs-dir", default="runs", help="root of run directories (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    p = sub.add_parser("gen-data", parents=[common], help="render the synthetic multi-scanner dataset")
    p.add_argument("--out", help="output directory (default: <runs-dir>/data/<hash>)")
    sub.add_parser("pretrain", parents=[common], help="stage 1: tuple-loss pretraining per seed")
    for verb, text in (("finetune", "stage 2: segmentation fine-tuning"), ("eval", "tiled test-set evaluation"),
                       ("run", "pretrain, finetune, eval and report in one go")):
        p = sub.add_parser(verb, parents=[common], help=text)
        p.add_argument("--modes", nargs="+", default=["all"], help=f"subset of {', '.join(MODES)} (default: all)")
    sub.add_parser("report", parents=[common], help="aggregate records into tables and traces")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        config = build_config(args)
        if args.verb == "gen-data":
            cmd_gen_data(args, config)
            return EXIT_OK
        root = run_dir(args, config)
        if args.verb == "report":
            cmd_report(args, config, root)
            return EXIT_OK
        pipe = Pipeline(config, load_slides(config))
        modes = _modes(getattr(args, "modes", None))
        for seed in config.seeds:
            if args.verb in ("pretrain", "run") and (args.verb == "pretrain" or
                                                     any(m.startswith("pretrained") for m in modes)):
                _pretrain(pipe, root, seed)
            if args.verb in ("finetune", "run"):
                for mode in modes:
                    _finetune(pipe, root, seed, mode)
            if args.verb in ("eval", "run"):
                for mode in modes:
                    _eval(pipe, root, seed, mode)
        if args.verb == "run":
            cmd_report(args, config, root)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, UndefinedMetricError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BarlowTupleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
