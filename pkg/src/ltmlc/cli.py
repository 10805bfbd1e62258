"""Command-line entry point: ``ltmlc <command> [--config run.json] [--set section.key=value]``.

Exit codes: 0 success, 2 invalid configuration or usage, 1 runtime failure.
Failures print one JSON line ``{"error": ..., "pointer": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import ablation
from .config import ConfigError, RunConfig, describe_keys, load_config
from .core import (
    ValidationError,
    build_vocabulary,
    read_predictions,
    read_vocabulary,
    write_predictions,
    write_vocabulary,
)
from .datapipe import (
    harmonize_labels,
    load_dataset,
    merge,
    read_label_table,
    read_mapping,
    write_dataset,
    write_label_table,
)
from .evaluation import mean_average_precision
from .inference import class_wise_ensemble, model_wise_ensemble, read_bank, tta_predict
from .model import load_model, predict, read_embedding_csv, save_model
from .synthgen import generate_dataset
from .training import check_class_weights

log = logging.getLogger("ltmlc")

CHECKPOINT_NAME = "checkpoint.ltmlc"
HISTORY_NAME = "history.csv"

COMMAND_SECTIONS = {
    "generate-data": ["synth", "paths"],
    "train": ["model", "train", "augment", "paths"],
    "predict": ["tta", "paths"],
    "evaluate": ["paths"],
    "ensemble": ["ensemble", "paths"],
    "harmonize": [],
    "ablate": ["model", "train", "augment", "tta", "ablate", "paths"],
}


def configure_threads() -> None:
    """Apply ``LTMLC_THREADS``; 0 (the default) means single-threaded deterministic mode."""
    threads = int(os.environ.get("LTMLC_THREADS", "0"))
    if threads <= 0:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(threads)


def _split_csv(cfg: RunConfig, split: str) -> Path:
    return Path(cfg.paths.data_dir) / split / "labels.csv"


def _load_split(cfg: RunConfig, split: str, vocab=None, height=None, width=None):
    path = _split_csv(cfg, split)
    return load_dataset(path, path.parent, vocab,
                        height or cfg.model.height, width or cfg.model.width)


def read_class_weights(path, vocab) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["class", "weight"]:
        raise ValidationError(f"{path}: header must be class,weight")
    table = {row[0]: float(row[1]) for row in rows[1:]}
    unknown = sorted(set(table) - set(vocab.names))
    if unknown:
        raise ValidationError(f"{path}: unknown classes {unknown}")
    weights = [table.get(name, 1.0) for name in vocab.names]
    check_class_weights(weights)
    return weights


def _embeddings(cfg: RunConfig, vocab):
    return read_embedding_csv(cfg.paths.embeddings, vocab) if cfg.paths.embeddings else None


# -- commands -----------------------------------------------------------------


def cmd_generate_data(cfg: RunConfig, args) -> None:
    out = Path(args.out or cfg.paths.data_dir)
    splits = generate_dataset(cfg.synth)
    for name, data in zip(("train", "dev", "test"), splits):
        write_dataset(data, out / name)
    write_vocabulary(splits[0].vocabulary, out / "vocab.txt")
    print(f"wrote {sum(len(s) for s in splits)} images to {out}")


def cmd_train(cfg: RunConfig, args) -> None:
    train_set = _load_split(cfg, "train")
    vocab = train_set.vocabulary
    if args.extra:
        extra = [load_dataset(p, Path(p).parent, vocab, cfg.model.height, cfg.model.width) for p in args.extra]
        train_set = merge([train_set, *extra])
    dev_set = _load_split(cfg, "dev", vocab)
    if cfg.paths.class_weights:
        cfg.train.class_weights = read_class_weights(cfg.paths.class_weights, vocab)
    model, result = ablation.fit_model(cfg, train_set, dev_set, _embeddings(cfg, vocab))
    run_dir = Path(cfg.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, run_dir / CHECKPOINT_NAME,
               {"train": asdict(cfg.train), "best_epoch": result.best_epoch})
    (run_dir / HISTORY_NAME).write_text(result.history_csv(), encoding="utf-8")
    print(f"best epoch {result.best_epoch}; checkpoint {run_dir / CHECKPOINT_NAME}")


def cmd_predict(cfg: RunConfig, args) -> None:
    run_dir = Path(cfg.paths.run_dir)
    model = load_model(args.checkpoint or run_dir / CHECKPOINT_NAME)
    labels = Path(args.labels) if args.labels else _split_csv(cfg, args.split)
    data = load_dataset(labels, labels.parent, model.vocab, model.config.height, model.config.width)
    if args.tta:
        pm = tta_predict(model, data, read_bank(args.tta), cfg.tta.merge)
    elif cfg.tta.enabled:
        pm = tta_predict(model, data, cfg.tta.transforms(), cfg.tta.merge)
    else:
        pm = predict(model, data)
    out = Path(args.out) if args.out else run_dir / f"predictions_{args.split}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(pm, out)
    print(f"wrote {out}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    run_dir = Path(cfg.paths.run_dir)
    labels_path = Path(args.labels) if args.labels else _split_csv(cfg, args.split)
    labels = read_label_table(labels_path)
    preds_path = Path(args.predictions) if args.predictions else run_dir / f"predictions_{args.split}.csv"
    report = mean_average_precision(read_predictions(preds_path, labels.vocabulary), labels)
    out = Path(args.out) if args.out else run_dir / f"report_{args.split}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(), encoding="utf-8")
    if report.excluded:
        print("excluded (no positives): " + ", ".join(report.excluded))
    print(f"mAP,{report.mAP:.17g}")


def cmd_ensemble(cfg: RunConfig, args) -> None:
    mode = (args.mode or cfg.ensemble.mode).replace("-", "_")
    k = args.k if args.k is not None else cfg.ensemble.k
    if not args.test_preds:
        raise ValidationError("--test-preds is required")
    if mode == "model_wise":
        vocab = read_label_table(args.dev_labels).vocabulary if args.dev_labels else None
        if vocab is None:
            with open(args.test_preds[0], encoding="utf-8") as fh:
                vocab = read_vocabulary_from_header(fh.readline())
        test = [read_predictions(p, vocab) for p in args.test_preds]
        if k is not None:
            if not args.dev_preds or not args.dev_labels:
                raise ValidationError("model-wise --k needs --dev-preds and --dev-labels to rank models")
            labels = read_label_table(args.dev_labels)
            dev = [read_predictions(p, vocab) for p in args.dev_preds]
            ranking = sorted(range(len(dev)), key=lambda m: (-mean_average_precision(dev[m], labels).mAP, m))
            test = [test[m] for m in sorted(ranking[:k])]
        pm = model_wise_ensemble(test)
    elif mode == "class_wise":
        if not args.dev_preds or not args.dev_labels:
            raise ValidationError("class-wise ensembling needs --dev-preds and --dev-labels")
        labels = read_label_table(args.dev_labels)
        dev = [read_predictions(p, labels.vocabulary) for p in args.dev_preds]
        test = [read_predictions(p, labels.vocabulary) for p in args.test_preds]
        pm = class_wise_ensemble(dev, labels, test, 3 if k is None else k)
    else:
        raise ConfigError("/ensemble/mode", f"unknown mode '{mode}'")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_predictions(pm, args.out)
    print(f"wrote {args.out}")


def read_vocabulary_from_header(line: str):
    names = next(csv.reader([line.strip()]))
    if not names or names[0] != "image_id":
        raise ValidationError("prediction CSV header must start with image_id")
    return build_vocabulary(names[1:])


def cmd_harmonize(cfg: RunConfig, args) -> None:
    mapping = read_mapping(args.mapping)
    target = read_vocabulary(args.target_vocab)
    table = read_label_table(args.labels)
    labels = harmonize_labels(table.labels, table.vocabulary, mapping, target)
    base = Path(args.labels).resolve().parent
    paths = [str((base / p).resolve()) for p in table.paths]
    ids = [f"ext_{i}" for i in table.image_ids]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_label_table(args.out, target, ids, paths, labels)
    zero = int(np.sum(~labels.any(axis=0)))
    print(f"wrote {args.out}: {len(ids)} rows, {zero} all-zero target columns")


def cmd_ablate(cfg: RunConfig, args) -> None:
    train_set = _load_split(cfg, "train")
    dev_set = _load_split(cfg, "dev", train_set.vocabulary)
    rows = ablation.run_ablation(cfg, train_set, dev_set, _embeddings(cfg, train_set.vocabulary))
    out = Path(args.out) if args.out else Path(cfg.paths.run_dir) / "ablation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ablation.ablation_csv(rows), encoding="utf-8")
    print(f"wrote {out} ({len(rows)} cells)")


COMMANDS = {
    "generate-data": (cmd_generate_data, "write a synthetic long-tailed dataset"),
    "train": (cmd_train, "train a label-query model, keeping the best dev-mAP epoch"),
    "predict": (cmd_predict, "score a labelled split, optionally with TTA"),
    "evaluate": (cmd_evaluate, "per-class AP report and mAP"),
    "ensemble": (cmd_ensemble, "model-wise or class-wise ensembling of prediction CSVs"),
    "harmonize": (cmd_harmonize, "map an external label CSV into the target vocabulary"),
    "ablate": (cmd_ablate, "train/evaluate the on/off grid of tricks"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltmlc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           epilog=describe_keys(COMMAND_SECTIONS[name]),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (JSON literal or bare string)")
        if name == "generate-data":
            p.add_argument("--out", help="output directory (default paths.data_dir)")
        elif name == "train":
            p.add_argument("--extra", action="append", default=[],
                           help="additional harmonized label CSV to merge into training")
        elif name == "predict":
            p.add_argument("--checkpoint")
            p.add_argument("--split", default="test")
            p.add_argument("--labels", help="label CSV to score instead of a split")
            p.add_argument("--tta", help="JSON transform bank; enables TTA")
            p.add_argument("--out")
        elif name == "evaluate":
            p.add_argument("--predictions")
            p.add_argument("--labels")
            p.add_argument("--split", default="test")
            p.add_argument("--out")
        elif name == "ensemble":
            p.add_argument("--mode", choices=["class-wise", "model-wise", "class_wise", "model_wise"])
            p.add_argument("--k", type=int)
            p.add_argument("--dev-preds", nargs="+")
            p.add_argument("--dev-labels")
            p.add_argument("--test-preds", nargs="+")
            p.add_argument("--out", required=True)
        elif name == "harmonize":
            p.add_argument("--mapping", required=True)
            p.add_argument("--target-vocab", required=True)
            p.add_argument("--labels", required=True, help="external label CSV")
            p.add_argument("--out", required=True)
        elif name == "ablate":
            p.add_argument("--out")
    return parser


def _fail(code: int, message: str, pointer: str | None = None) -> int:
    payload = {"error": message}
    if pointer is not None:
        payload["pointer"] = pointer
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("LTMLC_LOG", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        return _fail(2, str(exc), exc.pointer)
    except OSError as exc:
        return _fail(2, f"cannot read config: {exc}")
    configure_threads()
    try:
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        return _fail(2, str(exc), exc.pointer)
    except (ValueError, TypeError, OSError, RuntimeError, KeyError) as exc:
        return _fail(1, f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
