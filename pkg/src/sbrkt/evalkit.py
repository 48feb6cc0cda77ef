"""AUC computation, model evaluation, experiment orchestration and reports."""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as D

__all__ = [
    "auc",
    "safe_auc",
    "EvalReport",
    "evaluate",
    "emit_report",
    "render_report_figure",
    "run_experiment",
    "config_hash",
    "eval_threads",
]


def auc(scores, labels):
    """Mann-Whitney AUC via rank sums; ties credited 0.5.

    Raises on single-class input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("auc: scores and labels must be equal-length 1-D")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need both positive and negative labels")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    # average ranks over tie groups (1-based)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def safe_auc(scores, labels, default=0.5):
    """AUC, or `default` when one class is absent (tiny validation splits)."""
    try:
        return auc(scores, labels)
    except ValueError:
        return default


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EvalReport:
    model_name: str
    dataset_name: str
    split_name: str
    auc: float
    n_predictions: int
    seed: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "model": self.model_name,
                "dataset": self.dataset_name,
                "split": self.split_name,
                "auc": self.auc,
                "n": self.n_predictions,
                "seed": self.seed,
                "config_hash": config_hash(self.config),
            },
            sort_keys=True,
        )


def eval_threads() -> int:
    """Evaluation parallelism, capped by the SBRKT_THREADS env var."""
    cap = os.environ.get("SBRKT_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def _shard_students(records, n_shards):
    by_student = D.student_order(records)
    students = sorted(by_student)
    shards = [[] for _ in range(min(n_shards, len(students)))]
    for i, s in enumerate(students):
        shards[i % len(shards)].extend(by_student[s])
    return shards


def predict_records(model, records, vocab=None):
    """Pooled (scores, labels) from any trained model.

    Models either consume raw records directly (BKT) or padded batches
    (SBRKT / DKT, which need a vocab to encode).
    """
    if hasattr(model, "predict_records"):
        return model.predict_records(records)
    vocab = vocab if vocab is not None else model.vocab
    batches = D.batch_sequences(records, vocab)
    return model.predict_batches(batches)


def evaluate(model, records, dataset_name="dataset", split_name="test", seed=0, vocab=None,
             model_name=None, config=None) -> EvalReport:
    """Micro-pooled AUC over all students' step-level predictions."""
    n_threads = eval_threads()
    shards = _shard_students(records, n_threads)
    if len(shards) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=len(shards)) as pool:
            parts = list(pool.map(lambda sh: predict_records(model, sh, vocab), shards))
        scores = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    else:
        scores, labels = predict_records(model, records, vocab)
    if len(scores) == 0:
        raise ValueError("evaluate: no valid predictions")
    return EvalReport(
        model_name=model_name or type(model).__name__,
        dataset_name=dataset_name,
        split_name=split_name,
        auc=auc(scores, labels),
        n_predictions=int(len(scores)),
        seed=seed,
        config=config or {},
    )


def emit_report(reports):
    """JSON lines (one report each) plus an aligned plain-text table."""
    jsonl = "".join(r.to_json() + "\n" for r in reports)
    headers = ["model", "dataset", "split", "auc", "n", "seed"]
    rows = [
        [r.model_name, r.dataset_name, r.split_name, f"{r.auc:.4f}", str(r.n_predictions), str(r.seed)]
        for r in reports
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(row):
        return "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
    table = "\n".join([fmt(headers)] + [fmt(row) for row in rows]) + "\n"
    return jsonl, table


def render_report_figure(reports, path) -> None:
    """Bar chart of AUC per (model, split), saved next to the text outputs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [f"{r.model_name}\n{r.split_name}" for r in reports]
    values = [r.auc for r in reports]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(reports)), 3.5))
    ax.bar(range(len(reports)), values, color="#4878a8")
    ax.set_xticks(range(len(reports)))
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.0)
    ax.axhline(0.5, color="gray", linestyle="--", linewidth=0.8)
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.4f}", ha="center", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_training_curve(log, path) -> None:
    """Loss / validation-AUC curves for one training run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [e.epoch for e in log]
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    ax1.plot(epochs, [e.train_loss for e in log], color="#a84848", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="#a84848")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [e.val_auc for e in log], color="#4878a8", label="val AUC")
    ax2.set_ylabel("val AUC", color="#4878a8")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def run_experiment(exp_config: dict, seed: int = 0):
    """Train and evaluate a pipeline of models on one shared split.

    `exp_config` keys: `dataset` (path to canonical CSV), `models` (subset
    of sbrkt / sbrkt-tanh / sbrkt-01 / sbrkt-dense / bkt / dkt / bkt+aux /
    dkt+aux), optional `sbrkt` (SBRKTConfig overrides), optional training
    overrides `max_epochs` / `patience` / `max_len` / `batch_size`. Any
    "+aux" entry trains an SBRKT first (or reuses the one in `models`) and
    augments the dataset with its exported codes.
    """
    from . import auxpipe
    from .baselines import BKTModel, DKTConfig, DKTModel, train_bkt, train_dkt
    from .model import SBRKTConfig, SBRKTModel, train_sbrkt

    path = exp_config["dataset"]
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    dataset_name = exp_config.get("name", os.path.splitext(os.path.basename(path))[0])
    models = list(exp_config.get("models", ["sbrkt", "bkt", "bkt+aux"]))
    max_epochs = exp_config.get("max_epochs", 200)
    patience = exp_config.get("patience", 10)
    max_len = exp_config.get("max_len", D.DEFAULT_MAX_LEN)
    batch_size = exp_config.get("batch_size", 128)

    records = D.read_interactions(path).records
    train, val, test = D.split_students(records, seed=seed)
    vocab = D.build_vocab(train)

    def make_batches(voc):
        return (
            D.batch_sequences(train, voc, max_len, batch_size),
            D.batch_sequences(val, voc, max_len, batch_size),
        )

    reports = []
    sbrkt_variants = [m for m in models if m.startswith("sbrkt")]
    need_aux = any(m.endswith("+aux") for m in models)
    aux_source = exp_config.get("aux_from", sbrkt_variants[0] if sbrkt_variants else "sbrkt")

    trained_sbrkt = {}

    def get_sbrkt(name):
        if name in trained_sbrkt:
            return trained_sbrkt[name]
        variant = {"sbrkt": "alphabeta", "sbrkt-tanh": "tanh",
                   "sbrkt-01": "zeroone", "sbrkt-dense": "dense"}[name]
        overrides = dict(exp_config.get("sbrkt", {}))
        overrides["variant"] = variant
        cfg = SBRKTConfig(num_kcs=vocab.num_kcs, **overrides)
        tb, vb = make_batches(vocab)
        params, log = train_sbrkt(
            tb, vb, cfg, vocab.num_questions, seed=seed,
            max_epochs=max_epochs, patience=patience,
        )
        model = SBRKTModel(config=cfg, params=params, vocab=vocab)
        trained_sbrkt[name] = (model, log)
        return trained_sbrkt[name]

    for name in models:
        if name.startswith("sbrkt"):
            model, _ = get_sbrkt(name)
            reports.append(evaluate(model, test, dataset_name, "test", seed,
                                    vocab=vocab, model_name=name, config=exp_config))
        elif name == "bkt":
            params, _ = train_bkt(train, val, vocab.kcs, seed=seed,
                                  max_epochs=max_epochs, patience=patience, max_len=max_len)
            model = BKTModel(params=params, kc_index=vocab.kc_index)
            reports.append(evaluate(model, test, dataset_name, "test", seed,
                                    model_name=name, config=exp_config))
        elif name == "dkt":
            cfg = DKTConfig(num_kcs=vocab.num_kcs)
            tb, vb = make_batches(vocab)
            params, _ = train_dkt(tb, vb, cfg, seed=seed,
                                  max_epochs=max_epochs, patience=patience)
            model = DKTModel(config=cfg, params=params)
            reports.append(evaluate(model, test, dataset_name, "test", seed,
                                    vocab=vocab, model_name=name, config=exp_config))
        elif name in ("bkt+aux", "dkt+aux"):
            smodel, _ = get_sbrkt(aux_source)
            assignment = auxpipe.extract_codes(smodel, vocab)
            aug_train = auxpipe.augment_records(train, assignment)
            aug_val = auxpipe.augment_records(val, assignment)
            aug_test = auxpipe.augment_records(test, assignment)
            aug_vocab = D.build_vocab(aug_train)
            if name == "bkt+aux":
                params, _ = train_bkt(aug_train, aug_val, aug_vocab.kcs, seed=seed,
                                      max_epochs=max_epochs, patience=patience, max_len=max_len)
                model = BKTModel(params=params, kc_index=aug_vocab.kc_index)
                reports.append(evaluate(model, aug_test, dataset_name, "test", seed,
                                        model_name=name, config=exp_config))
            else:
                cfg = DKTConfig(num_kcs=aug_vocab.num_kcs)
                tb = D.batch_sequences(aug_train, aug_vocab, max_len, batch_size)
                vb = D.batch_sequences(aug_val, aug_vocab, max_len, batch_size)
                params, _ = train_dkt(tb, vb, cfg, seed=seed,
                                      max_epochs=max_epochs, patience=patience)
                model = DKTModel(config=cfg, params=params)
                reports.append(evaluate(model, aug_test, dataset_name, "test", seed,
                                        vocab=aug_vocab, model_name=name, config=exp_config))
        else:
            raise ValueError(f"unknown model {name!r} in experiment config")
    return reports
