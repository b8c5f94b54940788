"""``meg`` command line: train, explain, eval, synth."""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

from meg.chem.molgraph import MolGraphError, check_validity
from meg.chem.smiles import parse_smiles
from meg.config import ConfigError, RunConfig, load_config
from meg.data import SYNTH_KINDS, DataError, load_csv, split, synth_task, write_skipped_report
from meg.gnn import CheckpointError, LabelTaskMismatch, NonFiniteLoss, evaluate, load_checkpoint, save_checkpoint, train_predictor
from meg.rl import NoCounterfactualFound, explain

log = logging.getLogger("meg")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_BAD_MOLECULE = 5
EXIT_NO_COUNTERFACTUAL = 6
EXIT_TASK_MISMATCH = 7


class CommandError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(text: str, out: str | None) -> None:
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _config(args: argparse.Namespace) -> RunConfig:
    flags = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    return load_config(args.config, flags)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    task = cfg.task or "classification"
    try:
        data = load_csv(args.dataset, task, cfg.smiles_column, cfg.label_column)
        train, val, _ = split(data, cfg.fractions, cfg.seed)
    except (OSError, DataError) as exc:
        raise CommandError(EXIT_DATA, str(exc)) from exc
    if data.skipped:
        log.warning("skipped %d invalid row(s)", len(data.skipped))
        if args.skipped:
            write_skipped_report(data.skipped, args.skipped)
    try:
        result = train_predictor(train, val, cfg.train_config(), n_classes=cfg.n_classes)
    except LabelTaskMismatch as exc:
        raise CommandError(EXIT_DATA, str(exc)) from exc
    except NonFiniteLoss as exc:
        raise CommandError(EXIT_DIVERGED, str(exc)) from exc
    Path(args.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, args.checkpoint)
    metrics = "".join(json.dumps(m.to_json()) + "\n" for m in result.history)
    write_atomic(args.metrics, metrics)
    best = result.history[result.best_epoch - 1]
    log.info("best epoch %d: validation %s %.4f", result.best_epoch, result.metric_name, best.val_metric)
    return 0


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise CommandError(EXIT_CONFIG, f"cannot load checkpoint: {exc}") from exc


def cmd_explain(args: argparse.Namespace) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint)
    if cfg.task and cfg.task != model.task:
        raise CommandError(EXIT_TASK_MISMATCH, f"checkpoint is {model.task}, config says {cfg.task}")
    try:
        mol = parse_smiles(args.smiles)
    except MolGraphError as exc:
        raise CommandError(EXIT_BAD_MOLECULE, f"invalid molecule {args.smiles!r}: {exc}") from exc
    if not check_validity(mol).valid:
        raise CommandError(EXIT_BAD_MOLECULE, f"invalid molecule {args.smiles!r}")
    try:
        result = explain(model, mol, cfg.episode_config(), target=cfg.target)
    except NoCounterfactualFound as exc:
        raise CommandError(EXIT_NO_COUNTERFACTUAL, str(exc)) from exc
    emit(json.dumps(result.to_json(), indent=2) + "\n", args.out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint)
    if cfg.task and cfg.task != model.task:
        raise CommandError(EXIT_TASK_MISMATCH, f"checkpoint is {model.task}, config says {cfg.task}")
    try:
        data = load_csv(args.dataset, model.task, cfg.smiles_column, cfg.label_column)
    except (OSError, DataError) as exc:
        raise CommandError(EXIT_DATA, str(exc)) from exc
    try:
        loss, metric = evaluate(model, data)
    except LabelTaskMismatch as exc:
        raise CommandError(EXIT_TASK_MISMATCH, str(exc)) from exc
    name = "accuracy" if model.task == "classification" else "mse"
    report = {"task": model.task, "n": len(data), "skipped": len(data.skipped), name: metric, "loss": loss}
    emit(json.dumps(report, indent=2) + "\n", args.out)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _config(args)
    try:
        data = synth_task(args.kind, args.n, cfg.seed)
    except DataError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from exc
    buf = io.StringIO()
    data.write_csv(buf, cfg.smiles_column, cfg.label_column)
    emit(buf.getvalue(), args.out)
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("configuration (overrides --config file and MEG_* environment)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f.name, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the graph property predictor")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", default="model.ckpt")
    p.add_argument("--metrics", default="metrics.jsonl")
    p.add_argument("--skipped", default=None, help="write skipped-row report (JSON lines) here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="generate counterfactuals for one molecule")
    p.add_argument("checkpoint")
    p.add_argument("smiles")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="accuracy or MSE of a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    p.add_argument("kind", choices=SYNTH_KINDS)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth)

    for name in ("train", "explain", "eval", "synth"):
        sp = sub.choices[name]
        sp.add_argument("--config", default=None, help="JSON config file")
        _add_config_flags(sp)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except CommandError as exc:
        log.error("%s", exc)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
