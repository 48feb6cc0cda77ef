"""Command-line entry point: train / export-aux / augment / eval.

Runs are driven by a JSON config file plus flag overrides; unknown config
keys are rejected. Every command is deterministic under its seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import auxpipe, data as D, evalkit
from .baselines import (
    BKTModel,
    DKTConfig,
    DKTModel,
    load_bkt,
    load_dkt,
    save_bkt,
    save_dkt,
    train_bkt,
    train_dkt,
)
from .checkpoint import load_checkpoint
from .model import SBRKTConfig, SBRKTModel, load_model, save_model, train_sbrkt

MODEL_CHOICES = ("sbrkt", "sbrkt-tanh", "sbrkt-01", "sbrkt-dense", "bkt", "dkt")
_VARIANT_OF = {
    "sbrkt": "alphabeta",
    "sbrkt-tanh": "tanh",
    "sbrkt-01": "zeroone",
    "sbrkt-dense": "dense",
}
_CONFIG_KEYS = {
    "dataset", "model", "seed", "out", "aux", "sbrkt", "name",
    "max_epochs", "patience", "max_len", "batch_size",
}
_SBRKT_KEYS = {"num_aux", "embed_dim", "c_max", "proj_dim", "hidden_dim", "level_scale"}


class CliError(Exception):
    pass


def _load_run_config(args) -> dict:
    cfg = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        unknown = set(cfg) - _CONFIG_KEYS
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        bad = set(cfg.get("sbrkt", {})) - _SBRKT_KEYS
        if bad:
            raise CliError(f"unknown sbrkt config keys: {sorted(bad)}")
    for key in ("seed", "out", "model", "aux"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", "runs/default")
    if "dataset" not in cfg:
        raise CliError("config must name a dataset")
    if "model" not in cfg:
        raise CliError("config must select a model (or pass --model)")
    if cfg["model"] not in MODEL_CHOICES:
        raise CliError(f"unknown model {cfg['model']!r}, choose from {MODEL_CHOICES}")
    if cfg.get("aux") and cfg["model"] not in ("bkt", "dkt"):
        raise CliError("--aux is only valid for bkt/dkt model selections")
    return cfg


def _read_dataset(path):
    if not os.path.exists(path):
        raise CliError(f"dataset file not found: {path}")
    return D.read_interactions(path).records


def _write_log_csv(log, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_auc"])
        for entry in log:
            writer.writerow([entry.epoch, repr(entry.train_loss), repr(entry.val_auc)])


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    seed = int(cfg["seed"])
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    records = _read_dataset(cfg["dataset"])
    if cfg.get("aux"):
        assignment = auxpipe.read_aux_csv(cfg["aux"])
        records = auxpipe.augment_records(records, assignment)
    train, val, _test = D.split_students(records, seed=seed)
    vocab = D.build_vocab(train)
    max_len = int(cfg.get("max_len", D.DEFAULT_MAX_LEN))
    batch_size = int(cfg.get("batch_size", 128))
    max_epochs = int(cfg.get("max_epochs", 200))
    patience = int(cfg.get("patience", 10))
    name = cfg["model"]
    dataset_name = cfg.get("name", os.path.splitext(os.path.basename(cfg["dataset"]))[0])

    ckpt_path = os.path.join(out_dir, "model.ckpt")
    if name in _VARIANT_OF:
        sb = dict(cfg.get("sbrkt", {}))
        sb["variant"] = _VARIANT_OF[name]
        model_cfg = SBRKTConfig(num_kcs=vocab.num_kcs, **sb)
        tb = D.batch_sequences(train, vocab, max_len, batch_size)
        vb = D.batch_sequences(val, vocab, max_len, batch_size)
        params, log = train_sbrkt(tb, vb, model_cfg, vocab.num_questions, seed=seed,
                                  max_epochs=max_epochs, patience=patience)
        model = SBRKTModel(config=model_cfg, params=params, vocab=vocab)
        save_model(model, ckpt_path)
        report = evalkit.evaluate(model, val, dataset_name, "val", seed,
                                  vocab=vocab, model_name=name, config=cfg)
    elif name == "bkt":
        params, log = train_bkt(train, val, vocab.kcs, seed=seed,
                                max_epochs=max_epochs, patience=patience, max_len=max_len)
        model = BKTModel(params=params, kc_index=vocab.kc_index)
        save_bkt(model, ckpt_path)
        with open(os.path.join(out_dir, "bkt_params.csv"), "w", encoding="utf-8") as fh:
            fh.write(params.export_csv())
        report = evalkit.evaluate(model, val, dataset_name, "val", seed,
                                  model_name=name, config=cfg)
    else:
        model_cfg = DKTConfig(num_kcs=vocab.num_kcs)
        tb = D.batch_sequences(train, vocab, max_len, batch_size)
        vb = D.batch_sequences(val, vocab, max_len, batch_size)
        params, log = train_dkt(tb, vb, model_cfg, seed=seed,
                                max_epochs=max_epochs, patience=patience)
        model = DKTModel(config=model_cfg, params=params)
        save_dkt(model, ckpt_path, vocab=vocab)
        report = evalkit.evaluate(model, val, dataset_name, "val", seed,
                                  vocab=vocab, model_name=name, config=cfg)

    with open(os.path.join(out_dir, "vocab.json"), "w", encoding="utf-8") as fh:
        fh.write(vocab.to_json())
    _write_log_csv(log, os.path.join(out_dir, "training_log.csv"))
    evalkit.render_training_curve(log, os.path.join(out_dir, "loss_curve.png"))
    jsonl, table = evalkit.emit_report([report])
    with open(os.path.join(out_dir, "reports.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(jsonl)
    with open(os.path.join(out_dir, "report_table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    evalkit.render_report_figure([report], os.path.join(out_dir, "report_auc.png"))
    print(table, end="")
    return 0


def cmd_export_aux(args) -> int:
    model = load_model(args.checkpoint)
    if args.vocab:
        with open(args.vocab, encoding="utf-8") as fh:
            vocab = D.Vocab.from_json(fh.read())
    elif model.vocab is not None:
        vocab = model.vocab
    else:
        raise CliError("checkpoint has no embedded vocab; pass --vocab")
    assignment = auxpipe.extract_codes(model, vocab)
    auxpipe.write_aux_csv(assignment, args.out)
    print(f"wrote aux assignment for {len(assignment)} questions to {args.out}")
    return 0


def cmd_augment(args) -> int:
    assignment = auxpipe.read_aux_csv(args.aux)
    for qid, ids in assignment.items():
        for j in ids:
            if j >= args.num_aux:
                raise CliError(f"aux id {j} for {qid} out of range [0, {args.num_aux})")
    if not os.path.exists(args.dataset):
        raise CliError(f"dataset file not found: {args.dataset}")
    # Row-for-row rewrite: every input row appears in the output, with the
    # question's AUX ids appended to its kc_ids field.
    with open(args.dataset, newline="", encoding="utf-8") as fin:
        reader = csv.reader(fin)
        header = next(reader)
        if [h.strip() for h in header] != D.HEADER:
            raise CliError(f"bad header {header!r} in {args.dataset}")
        with open(args.out, "w", newline="", encoding="utf-8") as fout:
            writer = csv.writer(fout)
            writer.writerow(D.HEADER)
            for row in reader:
                if not row:
                    continue
                student, qid, kc_field, correct = (f.strip() for f in row)
                kcs = [k for k in kc_field.split(";") if k]
                kcs += [auxpipe.aux_kc_name(j) for j in assignment.get(qid, ())]
                writer.writerow([student, qid, ";".join(kcs), correct])
    print(f"wrote augmented dataset to {args.out}")
    return 0


def _check_vocab_overlap(records, known_kcs):
    unknown_first = None
    for rec in records:
        for kc in sorted(rec.kc_ids):
            if kc in known_kcs:
                return
            if unknown_first is None:
                unknown_first = kc
    raise CliError(f"vocab mismatch: no dataset KC is known to the model "
                   f"(first unknown id: {unknown_first!r})")


def cmd_eval(args) -> int:
    ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    kind = ckpt_cfg.get("model")
    records = _read_dataset(args.data)
    train, val, test = D.split_students(records, seed=args.seed)
    split_records = {"train": train, "val": val, "test": test}[args.split]
    dataset_name = os.path.splitext(os.path.basename(args.data))[0]

    if kind == "sbrkt":
        model = load_model(args.checkpoint)
        vocab = model.vocab
        _check_vocab_overlap(split_records, set(vocab.kcs))
        report = evalkit.evaluate(model, split_records, dataset_name, args.split,
                                  args.seed, vocab=vocab, model_name="sbrkt")
    elif kind == "bkt":
        model = load_bkt(args.checkpoint)
        _check_vocab_overlap(split_records, set(model.kc_index))
        report = evalkit.evaluate(model, split_records, dataset_name, args.split,
                                  args.seed, model_name="bkt")
    elif kind == "dkt":
        model, vocab = load_dkt(args.checkpoint)
        if vocab is None:
            raise CliError("DKT checkpoint has no embedded vocab")
        _check_vocab_overlap(split_records, set(vocab.kcs))
        report = evalkit.evaluate(model, split_records, dataset_name, args.split,
                                  args.seed, vocab=vocab, model_name="dkt")
    else:
        raise CliError(f"unrecognized checkpoint model kind {kind!r}")

    jsonl, table = evalkit.emit_report([report])
    print(table, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "reports.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(jsonl)
        with open(os.path.join(args.out, "report_table.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
        evalkit.render_report_figure([report], os.path.join(args.out, "report_auc.png"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbrkt",
                                     description="Knowledge tracing with learned auxiliary KCs")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON run config")
    p_train.add_argument("--config", help="JSON run config path")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out")
    p_train.add_argument("--model", choices=MODEL_CHOICES)
    p_train.add_argument("--aux", help="aux assignment CSV (bkt/dkt only)")
    p_train.set_defaults(func=cmd_train)

    p_exp = sub.add_parser("export-aux", help="export auxiliary KC codes from a checkpoint")
    p_exp.add_argument("checkpoint")
    p_exp.add_argument("--vocab", help="vocab JSON (defaults to the checkpoint's)")
    p_exp.add_argument("--out", required=True)
    p_exp.set_defaults(func=cmd_export_aux)

    p_aug = sub.add_parser("augment", help="append AUX KC ids to a dataset CSV")
    p_aug.add_argument("dataset")
    p_aug.add_argument("--aux", required=True)
    p_aug.add_argument("--out", required=True)
    p_aug.add_argument("--num-aux", type=int, default=32)
    p_aug.set_defaults(func=cmd_augment)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
