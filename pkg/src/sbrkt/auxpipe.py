"""Extract auxiliary-KC assignments from a trained model and augment datasets.

A question's code bits with the "presence" value (alpha for the default
quantizer, +1 for the tanh variant, 1 for the zero/one variant) become
auxiliary KC indices; downstream datasets gain them as new KC ids named
``AUX<j>``. The dense variant has no discrete representation and is
rejected.
"""

from __future__ import annotations

import csv
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .data import InteractionRecord
from .model import SBRKTModel, question_code

__all__ = [
    "AuxExtractionError",
    "extract_codes",
    "augment_records",
    "write_aux_csv",
    "read_aux_csv",
    "aux_kc_name",
]


class AuxExtractionError(ValueError):
    pass


def aux_kc_name(j: int) -> str:
    return f"AUX{j}"


def extract_codes(model: SBRKTModel, vocab) -> dict:
    """question_id -> sorted tuple of auxiliary-KC indices.

    Deterministic in the checkpoint; the shared unseen-question embedding
    row is not exported.
    """
    if model.config.variant == "dense":
        raise AuxExtractionError(
            "dense variant has no discrete representation usable in downstream tasks"
        )
    assignment = {}
    q_idx = np.arange(vocab.num_questions, dtype=np.int64)
    with ad.no_grad():
        qout = question_code(q_idx, model.params, model.config)
    for i, qid in enumerate(vocab.questions):
        bits = np.flatnonzero(qout.q_bits[i])
        assignment[qid] = tuple(int(j) for j in bits)
    return assignment


def augment_records(records, assignment: dict):
    """Add AUX<j> KC ids per the assignment; original KCs are kept."""
    out = []
    for rec in records:
        aux = assignment.get(rec.question_id)
        if aux:
            kc_ids = rec.kc_ids | {aux_kc_name(j) for j in aux}
            out.append(replace(rec, kc_ids=frozenset(kc_ids)))
        else:
            out.append(rec)
    return out


def write_aux_csv(assignment: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question_id", "aux_ids"])
        for qid in sorted(assignment):
            writer.writerow([qid, ";".join(str(j) for j in assignment[qid])])


def read_aux_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["question_id", "aux_ids"]:
            raise ValueError(f"{path}: bad aux CSV header {header!r}")
        assignment = {}
        for row in reader:
            if not row:
                continue
            qid, field = row[0], row[1] if len(row) > 1 else ""
            assignment[qid] = tuple(int(tok) for tok in field.split(";") if tok != "")
    return assignment
