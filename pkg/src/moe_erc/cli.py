"""``moe-erc`` command line: gen-data, train, eval, ablate, gates, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(non-finite loss or a failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import tensor as T
from .config import ConfigError, RunConfig, build_run_config, load_run_config, parse_override
from .dataset import DatasetError, write_dataset_dir
from .gate import write_gate_csv
from .losses import LossConfig
from .metrics import confusion_matrix, gate_stats, metrics_document, write_confusion_csv, write_metrics_json
from .model import VARIANTS, build_variant
from .trainer import (DivergenceError, Evaluation, TrainReport, evaluate, load_checkpoint, run_grad_check,
                      tiny_model_config, train)

log = logging.getLogger("moe_erc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
SWEEP_COLUMNS = ("variant", "gamma", "lambda", "alpha", "tau", "seed", "label", "test_weighted_f1", "status")
CELL_KEYS = ("variant", "gamma", "lambda", "alpha", "tau", "seed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which is reserved for numerical failures
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ artifacts

def write_evaluation(ev: Evaluation, class_names, run_dir: Path, extra: dict | None = None) -> dict:
    """metrics.json, confusion.csv and (for gated variants) gates.csv."""
    means = ev.betas.mean(axis=0) if ev.betas is not None else None
    doc = metrics_document(ev.labels, ev.predictions, ev.class_count, means)
    doc["expert_f1"] = ev.expert_f1()
    if ev.betas is not None:
        doc["gate_stats"] = gate_stats(ev.betas, ev.labels, ev.class_count).to_dict()
        write_gate_csv(ev.records, run_dir / "gates.csv")
    if extra:
        doc.update(extra)
    write_metrics_json(doc, run_dir / "metrics.json")
    write_confusion_csv(confusion_matrix(ev.labels, ev.predictions, ev.class_count), class_names,
                        run_dir / "confusion.csv")
    return doc


def _report_doc(report: TrainReport) -> dict:
    return {"best_epoch": report.best_epoch, "best_val_f1": report.best_val_f1,
            "parameter_count": report.parameter_count, "variant": report.variant}


def run_training(rc: RunConfig) -> tuple[Path, dict]:
    """Train, then evaluate the best weights on the test split; returns (run dir, metrics)."""
    run_dir = rc.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(rc.resolved(), indent=2, sort_keys=True) + "\n")
    tr, va, te = rc.data.load()
    log.info("run %s: variant=%s train=%d val=%d test=%d conversations", run_dir.name, rc.train.variant,
             len(tr), len(va), len(te))

    def progress(rec):
        log.info("epoch %3d  total %.4f  val_f1 %.4f", rec["epoch"], rec["total"], rec["val_f1"])

    model, report = train(tr, va, rc.train, rc.model, out_dir=run_dir, on_epoch=progress)
    ev = evaluate(model, te, rc.train.batch_size)
    doc = write_evaluation(ev, te.class_names, run_dir, {"split": "test", **_report_doc(report)})
    (run_dir / "report.json").write_text(json.dumps(
        {**_report_doc(report), "wall_seconds": report.wall_seconds, "checkpoint": report.checkpoint_path},
        indent=2) + "\n")
    return run_dir, doc


def _load_model(rc: RunConfig, checkpoint: Path | None):
    ckpt = checkpoint or rc.run_dir() / "best.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    model = build_variant(rc.train.variant, rc.model, rc.train.seed)
    try:
        load_checkpoint(ckpt, model.params)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{ckpt}: {e}") from None
    return model


def _split(rc: RunConfig, name: str):
    return dict(zip(("train", "val", "test"), rc.data.load()))[name]


# ------------------------------------------------------------------- commands

def cmd_gen_data(rc: RunConfig, args) -> int:
    out = Path(args.out) if args.out else rc.run_dir() / "data"
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = write_dataset_dir(rc.data.load(), out)
    except OSError as e:
        raise ConfigError(f"cannot write to {out}: {e}") from None
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(rc: RunConfig, args) -> int:
    run_dir, doc = run_training(rc)
    print(f"{run_dir}\ttest_weighted_f1={doc['weighted_f1']:.6f}")
    return EXIT_OK


def cmd_eval(rc: RunConfig, args) -> int:
    model = _load_model(rc, Path(args.checkpoint) if args.checkpoint else None)
    ds = _split(rc, args.split)
    out = Path(args.out) if args.out else rc.run_dir() / f"eval-{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    doc = write_evaluation(evaluate(model, ds, rc.train.batch_size), ds.class_names, out, {"split": args.split})
    print(f"{out}\t{args.split}_weighted_f1={doc['weighted_f1']:.6f}")
    return EXIT_OK


def cmd_gates(rc: RunConfig, args) -> int:
    if rc.train.variant not in ("full", "feat_moe", "no_loss_moe"):
        raise ConfigError(f"variant {rc.train.variant!r} has no gate")
    model = _load_model(rc, Path(args.checkpoint) if args.checkpoint else None)
    ds = _split(rc, args.split)
    out = Path(args.out) if args.out else rc.run_dir() / f"gates-{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    ev = evaluate(model, ds, rc.train.batch_size)
    doc = write_evaluation(ev, ds.class_names, out, {"split": args.split})
    means = doc["gate_means"]
    print(f"{out / 'gates.csv'}\tbeta_s={means[0]:.4f} beta_t={means[1]:.4f} beta_m={means[2]:.4f}")
    return EXIT_OK


def cmd_gradcheck(rc: RunConfig | None, args) -> int:
    if rc is None:
        model_cfg, loss_cfg, seed = tiny_model_config(), LossConfig(), 0
        variant = args.variant or "full"
    else:
        model_cfg, loss_cfg, seed, variant = rc.model, rc.loss, rc.train.seed, rc.train.variant
    report = run_grad_check(model_cfg, loss_cfg, seed=seed, variant=variant)
    print(report.summary())
    print(f"checked {report.checked} scalars")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def sweep_cells(manifest: dict) -> list[dict]:
    """Manifest = {"cells": [...]} and/or {"grid": {key: [values]}} (cartesian product)."""
    unknown = set(manifest) - {"cells", "grid"}
    if unknown or not manifest:
        raise ConfigError(f"sweep manifest needs 'cells' and/or 'grid'; unknown keys {sorted(unknown)}")
    cells = [dict(c) for c in manifest.get("cells", [])]
    grid = manifest.get("grid") or {}
    if grid:
        keys = list(grid)
        cells += [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    for c in cells:
        bad = set(c) - set(CELL_KEYS)
        if bad:
            raise ConfigError(f"sweep cell {c} has unknown keys {sorted(bad)}")
    return cells


def cell_label(gamma: float) -> str:
    return "cross-entropy" if gamma == 0 else f"focal(gamma={gamma:g})"


def _run_cell(job: tuple[RunConfig, dict]) -> dict:
    base, cell = job
    row = {"variant": cell.get("variant", base.train.variant), "gamma": cell.get("gamma", base.loss.gamma),
           "lambda": cell.get("lambda", base.loss.lam), "alpha": cell.get("alpha", base.loss.alpha),
           "tau": cell.get("tau", base.loss.tau), "seed": cell.get("seed", base.train.seed)}
    row["label"] = cell_label(row["gamma"])
    try:
        _, doc = run_training(base.with_cell(**cell))
        row.update(test_weighted_f1=repr(doc["weighted_f1"]), status="ok")
    except Exception as e:  # a failed cell is recorded and the sweep moves on
        row.update(test_weighted_f1="", status=f"failed: {type(e).__name__}: {e}")
    return row


def cmd_ablate(rc: RunConfig, args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"manifest {args.manifest}: {e}") from None
    cells = [(rc, c) for c in sweep_cells(manifest)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    sweep_id = hashlib.sha256((rc.run_id() + json.dumps(manifest, sort_keys=True)).encode()).hexdigest()[:12]
    out = Path(args.out) if args.out else rc.output_dir / f"sweep-{sweep_id}" / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{out}\t{len(rows)} cells, {failed} failed")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gates": cmd_gates, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moe-erc", description="Mixture-of-experts conversational emotion recognition.",
                epilog="Any --section.key=value flag overrides the config file, e.g. --train.seed=7.")
    p.add_argument("-v", "--verbose", action="store_true", help="per-epoch progress on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, config_required=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", nargs=None if config_required else "?", help="RunConfig JSON")
        sp.add_argument("--variant", choices=VARIANTS, help="overrides train.variant")
        return sp

    add("gen-data", "write train/val/test JSONL + sidecars").add_argument(
        "--out", help="directory (default: <output_dir>/<run-id>/data)")
    add("train", "train and evaluate one run")
    for name, help_ in (("eval", "evaluate a checkpoint"), ("gates", "export per-utterance gate weights")):
        sp = add(name, help_)
        sp.add_argument("--checkpoint", help="default: <output_dir>/<run-id>/best.ckpt")
        sp.add_argument("--split", choices=("train", "val", "test"), default="test")
        sp.add_argument("--out", help=f"output directory (default: <output_dir>/<run-id>/{name}-<split>)")
    sp = add("ablate", "run a sweep manifest")
    sp.add_argument("manifest", help="sweep manifest JSON")
    sp.add_argument("--jobs", type=int, default=1, help="cells trained in parallel processes")
    sp.add_argument("--out", help="sweep CSV path (default: <output_dir>/sweep-<id>/sweep.csv)")
    add("gradcheck", "finite-difference check of every parameter gradient", config_required=False)
    return p


def _split_overrides(argv: list[str]) -> tuple[list[str], list]:
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        tok = argv[i]
        head = tok[2:].split("=", 1)[0] if tok.startswith("--") else ""
        if "." in head or head == "output_dir":
            if "=" in tok:
                overrides.append(parse_override(tok))
            else:
                if i + 1 >= len(argv):
                    raise ConfigError(f"override {tok} has no value")
                overrides.append(parse_override(tok, argv[i + 1]))
                i += 1
        else:
            rest.append(tok)
        i += 1
    return rest, overrides


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, overrides = _split_overrides(argv)
        args = build_parser().parse_args(rest)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        if args.config is None:
            if overrides:
                raise ConfigError("overrides need a config file")
            rc = None
        else:
            rc = load_run_config(args.config, overrides, args.variant)
        return COMMANDS[args.command](rc, args)
    except UsageError as e:
        print(f"moe-erc: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, DatasetError) as e:
        print(f"moe-erc: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, T.NonFiniteError, FloatingPointError) as e:
        print(f"moe-erc: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


__all__ = ["main", "build_run_config", "sweep_cells", "cell_label", "run_training"]
