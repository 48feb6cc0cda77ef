"""Synthetic interaction generators.

Students practice questions tagged with visible KCs; correctness is also
driven by hidden KCs that never appear in the emitted CSV. The hidden
structure is the oracle for checking that learned auxiliary KCs recover
value that visible-KC-only models miss.
"""

from __future__ import annotations

import io

import numpy as np

from .data import InteractionRecord

__all__ = ["GroundTruth", "generate_hidden_kc_records", "records_to_csv", "generate_toy_records"]


class GroundTruth:
    """Question -> (visible KCs, hidden KCs) maps used by the generator."""

    def __init__(self, visible_of, hidden_of):
        self.visible_of = visible_of
        self.hidden_of = hidden_of


def generate_hidden_kc_records(
    n_students=2000,
    n_questions=60,
    n_visible=8,
    n_hidden=8,
    seq_len=40,
    seed=0,
    slip=0.05,
    guess=0.35,
    learn_visible=0.15,
    learn_hidden=0.08,
    prior=0.3,
):
    """Mastery-driven generator with a hidden half of the Q-matrix.

    Every question carries one visible and one hidden KC; a response is
    correct when each involved KC "passes" (1 - slip if mastered, guess
    otherwise), so hidden-KC mastery moves outcomes that visible-only
    models cannot separate. Returns (records, GroundTruth).
    """
    rng = np.random.default_rng(seed)
    visible_of = {f"Q{q}": int(rng.integers(n_visible)) for q in range(n_questions)}
    hidden_of = {f"Q{q}": int(rng.integers(n_hidden)) for q in range(n_questions)}
    questions = sorted(visible_of)

    records = []
    for s in range(n_students):
        sid = f"S{s:05d}"
        mastered_v = rng.random(n_visible) < prior
        mastered_h = rng.random(n_hidden) < prior
        picks = rng.integers(0, n_questions, size=seq_len)
        for step, qi in enumerate(picks):
            qid = questions[qi]
            v, hid = visible_of[qid], hidden_of[qid]
            p = 1.0
            for ok in (mastered_v[v], mastered_h[hid]):
                p *= (1.0 - slip) if ok else guess
            y = int(rng.random() < p)
            if not mastered_v[v] and rng.random() < learn_visible:
                mastered_v[v] = True
            if not mastered_h[hid] and rng.random() < learn_hidden:
                mastered_h[hid] = True
            records.append(
                InteractionRecord(sid, qid, frozenset({f"K{v}"}), y, step)
            )
    return records, GroundTruth(visible_of, hidden_of)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    buf.write("student_id,question_id,kc_ids,correct\n")
    for rec in records:
        buf.write(f"{rec.student_id},{rec.question_id},{';'.join(sorted(rec.kc_ids))},{rec.correct}\n")
    return buf.getvalue()


def generate_toy_records(seed=7):
    """Small demo dataset: 20 students, 5 visible KCs, 15 questions."""
    records, _ = generate_hidden_kc_records(
        n_students=20,
        n_questions=15,
        n_visible=5,
        n_hidden=2,
        seq_len=15,
        seed=seed,
    )
    return records
