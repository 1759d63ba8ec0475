"""Command-line entry point.

Subcommands: ``train``, ``cv``, ``eval``, ``spectrum``, ``embed``, ``synth``
and ``stats``. Training flags mirror the ``TrainConfig`` field names; values
from ``--config`` (JSON or ``key=value`` lines) sit underneath explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .dataset import (
    GraphDataset,
    dataset_stats,
    downsample_anomalies,
    generate_synthetic,
    load_tudataset,
    make_splits,
    write_tudataset,
)
from .harness import PreparedCache, TrainConfig, cross_validate, embed, evaluate, train
from .model import check_params
from .spectral import ORACLE_CAP, normalized_laplacian, rayleigh_vector, spectrum_report

OUTPUT_ENV = "GLADFORMER_OUTPUT_DIR"
DEFAULT_OUTPUT = "runs"

log = logging.getLogger("gladformer")


class UsageError(Exception):
    """Bad invocation; reported through the parser so the exit code is 2."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _field_types() -> dict[str, type]:
    kinds = {"int": int, "float": float, "str": str, "bool": _bool}
    return {f.name: kinds[f.type if isinstance(f.type, str) else f.type.__name__] for f in dataclasses.fields(TrainConfig)}


def read_config_file(path: str | Path) -> dict:
    """Parse a JSON object or ``key=value`` lines (``#`` starts a comment)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = None
    if isinstance(data, dict):
        return data
    types = _field_types()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = types[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from exc
    return out


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration")
    g.add_argument("--config", help="JSON or key=value file; explicit flags win")
    for name, kind in _field_types().items():
        flags = [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
        g.add_argument(*flags, dest=name, type=kind, default=argparse.SUPPRESS, metavar=name.upper())


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory holding the TUDataset text files")
    p.add_argument("--name", required=True, help="dataset name, the file prefix")
    p.add_argument("--features", default="auto", choices=["auto", "concat", "labels", "attributes"])


def _add_out_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=None, help=f"output directory (env {OUTPUT_ENV}, default {DEFAULT_OUTPUT})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gladformer", description="Graph-level anomaly detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("train", "train on a 70/15/15 holdout split"), ("cv", "stratified k-fold cross-validation")):
        p = sub.add_parser(name, help=help_text)
        _add_data_flags(p)
        _add_out_flag(p)
        _add_train_flags(p)

    p = sub.add_parser("eval", help="score a saved checkpoint")
    _add_data_flags(p)
    _add_out_flag(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--run-config", help="config.json of the run (default: next to the checkpoint)")

    p = sub.add_parser("embed", help="export fused graph embeddings as CSV")
    _add_data_flags(p)
    _add_out_flag(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--run-config", help="config.json of the run (default: next to the checkpoint)")

    p = sub.add_parser("spectrum", help="Rayleigh vectors and spectral energy per graph")
    _add_data_flags(p)
    _add_out_flag(p)
    p.add_argument("--cap", type=int, default=ORACLE_CAP, help="skip graphs larger than this")

    p = sub.add_parser("synth", help="write a synthetic dataset in TUDataset format")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-nodes", type=int, default=8)
    p.add_argument("--max-nodes", type=int, default=20)
    p.add_argument("--name", default="synthetic")
    _add_out_flag(p)

    p = sub.add_parser("stats", help="print dataset statistics as one JSON line")
    _add_data_flags(p)
    return parser


def output_dir(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for name in _field_types():
        if name in vars(args):
            values[name] = getattr(args, name)
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load(args: argparse.Namespace) -> GraphDataset:
    return load_tudataset(args.data, args.name, features=args.features)


def _maybe_downsample(ds: GraphDataset, cfg: TrainConfig) -> GraphDataset:
    if not cfg.downsample:
        return ds
    return downsample_anomalies(ds, cfg.downsample_fraction, cfg.seed)


def _load_run(args: argparse.Namespace):
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.run_config) if args.run_config else ckpt.with_name("config.json")
    cfg = TrainConfig.from_dict(json.loads(cfg_path.read_text()))
    params = load_checkpoint(ckpt)
    ds = _load(args)
    mcfg = cfg.model_config(ds.d)
    check_params(params, mcfg)
    return ds, cfg, mcfg, params


def cmd_train(args: argparse.Namespace) -> int:
    cfg = dataclasses.replace(resolve_config(args), split="holdout")
    ds = _maybe_downsample(_load(args), cfg)
    split = make_splits(ds, "holdout", seed=cfg.seed)
    params, report = train(cfg, ds, split)
    out = output_dir(args)
    report.write(out)
    save_checkpoint(params, out / "model.json")
    (out / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2))
    test = report.test.to_dict() if report.test else None
    print(json.dumps({"best_epoch": report.best_epoch, "best_val_auc": report.best_val_auc, "test": test, "out": str(out)}))
    return 0


def cmd_cv(args: argparse.Namespace) -> int:
    cfg = dataclasses.replace(resolve_config(args), split="kfold")
    ds = _maybe_downsample(_load(args), cfg)
    report = cross_validate(cfg, ds)
    out = output_dir(args)
    report.write(out)
    (out / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2))
    print(json.dumps({"mean": report.mean, "std": report.std, "out": str(out)}))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ds, _, mcfg, params = _load_run(args)
    metrics = evaluate(params, ds, list(range(len(ds))), mcfg)
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(metrics.to_dict(), indent=2))
    print(json.dumps(metrics.to_dict()))
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    ds, _, mcfg, params = _load_run(args)
    cache = PreparedCache(ds, mcfg)
    rows = embed(params, [cache[i] for i in range(len(ds))], mcfg)
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for g, row in zip(ds.graphs, rows):
            w.writerow([g.id, g.y, *(repr(float(v)) for v in row)])
    print(out / "embeddings.csv")
    return 0


def cmd_spectrum(args: argparse.Namespace) -> int:
    ds = _load(args)
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    skipped = 0
    with open(out / "rayleigh.csv", "w", newline="") as fr, \
            open(out / "eigenvalues.csv", "w", newline="") as fe, \
            open(out / "energy.csv", "w", newline="") as fs:
        wr, we, ws = csv.writer(fr), csv.writer(fe), csv.writer(fs)
        for g in ds.graphs:
            wr.writerow([g.id, *rayleigh_vector(g.x, normalized_laplacian(g)).tolist()])
            if g.n > args.cap:
                skipped += 1
                continue
            rep = spectrum_report(g, g.x, cap=args.cap)
            we.writerow([g.id, *rep.eigenvalues.tolist()])
            ws.writerow([g.id, *rep.energy.tolist()])
    if skipped:
        log.warning("%d graphs above the oracle cap of %d nodes had no spectrum report", skipped, args.cap)
    print(out)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        ds = generate_synthetic(args.n, args.rate, (args.min_nodes, args.max_nodes), seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = output_dir(args)
    write_tudataset(ds, out, args.name)
    print(json.dumps({"out": str(out), "name": args.name, "n_graphs": len(ds), "n_anom": int(ds.labels.sum())}))
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    ds = _load(args)
    record = {"name": args.name, **dataclasses.asdict(dataset_stats(ds))}
    print(json.dumps(record))
    return 0


COMMANDS = {
    "train": cmd_train,
    "cv": cmd_cv,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "spectrum": cmd_spectrum,
    "synth": cmd_synth,
    "stats": cmd_stats,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gladformer: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"gladformer: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
