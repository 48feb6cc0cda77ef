"""Interaction-log ingestion, vocabularies, multi-hot encoding and batching.

Canonical input is a UTF-8 CSV with header
``student_id,question_id,kc_ids,correct`` where ``kc_ids`` is a
``;``-separated list. Rows appear in temporal order per student.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "InteractionRecord",
    "ParseResult",
    "ParseError",
    "Vocab",
    "Batch",
    "parse_interactions",
    "read_interactions",
    "write_interactions",
    "build_vocab",
    "encode_multihot",
    "attach_label",
    "split_students",
    "batch_sequences",
    "student_order",
    "DEFAULT_MAX_LEN",
]

HEADER = ["student_id", "question_id", "kc_ids", "correct"]
DEFAULT_MAX_LEN = 200
_AUX_ID_RE = re.compile(r"^AUX(\d+)$")


class ParseError(ValueError):
    """Malformed interaction CSV."""


@dataclass(frozen=True)
class InteractionRecord:
    student_id: str
    question_id: str
    kc_ids: frozenset
    correct: int
    order_key: int


@dataclass
class ParseResult:
    records: list
    dropped_no_kc: int = 0


def parse_interactions(source) -> ParseResult:
    """Parse canonical CSV from an iterable of lines or an open file.

    Rows with an empty KC list are dropped and counted. Order keys are
    assigned per student by file appearance.
    """
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input: missing header row")
    if [h.strip() for h in header] != HEADER:
        raise ParseError(f"bad header {header!r}, expected {HEADER!r}")

    records = []
    dropped = 0
    counters: dict[str, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(f"line {lineno}: expected 4 fields, got {len(row)}")
        student, question, kc_field, correct_field = (f.strip() for f in row)
        if not student or not question:
            raise ParseError(f"line {lineno}: empty student_id or question_id")
        if correct_field not in ("0", "1"):
            raise ParseError(f"line {lineno}: correct must be 0 or 1, got {correct_field!r}")
        kc_ids = frozenset(k.strip() for k in kc_field.split(";") if k.strip())
        if not kc_ids:
            dropped += 1
            continue
        key = counters.get(student, 0)
        counters[student] = key + 1
        records.append(
            InteractionRecord(student, question, kc_ids, int(correct_field), key)
        )
    return ParseResult(records=records, dropped_no_kc=dropped)


def read_interactions(path) -> ParseResult:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_interactions(fh)


def write_interactions(records, path) -> None:
    """Write records back out in the canonical CSV format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADER)
        for rec in records:
            writer.writerow(
                [rec.student_id, rec.question_id, ";".join(_sorted_kcs(rec.kc_ids)), rec.correct]
            )


def _kc_sort_key(kc_id: str):
    # Auxiliary KCs (AUX<j>) sort after all original ids, by index, so that
    # augmented vocabularies keep original KCs at [0, N) and aux at [N, N+M).
    m = _AUX_ID_RE.match(kc_id)
    if m:
        return (1, int(m.group(1)), kc_id)
    return (0, 0, kc_id)


def _sorted_kcs(kc_ids):
    return sorted(kc_ids, key=_kc_sort_key)


@dataclass
class Vocab:
    questions: list
    kcs: list
    question_index: dict = field(init=False)
    kc_index: dict = field(init=False)

    def __post_init__(self):
        self.question_index = {q: i for i, q in enumerate(self.questions)}
        self.kc_index = {k: i for i, k in enumerate(self.kcs)}

    @property
    def num_questions(self) -> int:
        return len(self.questions)

    @property
    def num_kcs(self) -> int:
        return len(self.kcs)

    def to_json(self) -> str:
        return json.dumps({"questions": self.questions, "kcs": self.kcs}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        obj = json.loads(text)
        return cls(questions=list(obj["questions"]), kcs=list(obj["kcs"]))


def build_vocab(records) -> Vocab:
    """Deterministic vocabulary over the training split (sorted ids)."""
    if not records:
        raise ValueError("build_vocab: empty record list")
    questions = sorted({r.question_id for r in records})
    kcs = _sorted_kcs({k for r in records for k in r.kc_ids})
    return Vocab(questions=questions, kcs=kcs)


def encode_multihot(kc_ids, vocab: Vocab):
    """Multi-hot vector over the KC vocabulary.

    Unknown ids are skipped (test-time novelty); returns the vector and the
    number of skipped ids. An all-zero vector marks a step to exclude from
    loss and metrics.
    """
    vec = np.zeros(vocab.num_kcs)
    unknown = 0
    for k in kc_ids:
        idx = vocab.kc_index.get(k)
        if idx is None:
            unknown += 1
        else:
            vec[idx] = 1.0
    return vec, unknown


def attach_label(u, y: int):
    """(u*y) concat (u*(1-y)): correctness-labeled copy of any vector u."""
    u = np.asarray(u, dtype=np.float64)
    if y not in (0, 1):
        raise ValueError(f"attach_label: y must be 0 or 1, got {y!r}")
    return np.concatenate([u * y, u * (1 - y)])


def student_order(records):
    """Group records per student, each sorted by order key."""
    by_student: dict[str, list] = {}
    for rec in records:
        by_student.setdefault(rec.student_id, []).append(rec)
    for seq in by_student.values():
        seq.sort(key=lambda r: r.order_key)
    return by_student


def split_students(records, ratios=(0.8, 0.1, 0.1), seed=0):
    """Split whole students into train/val/test (no student spans splits).

    Floors each split size, gives the remainder to train, then guarantees
    val and test at least one student each.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    by_student = student_order(records)
    students = sorted(by_student)
    n = len(students)
    if n < 3:
        raise ValueError(f"need at least 3 students to split, got {n}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(n))
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_val = max(n_val, 1)
    n_test = max(n_test, 1)
    n_train = n - n_val - n_test
    picks = [students[i] for i in order]
    groups = (
        set(picks[:n_train]),
        set(picks[n_train : n_train + n_val]),
        set(picks[n_train + n_val :]),
    )
    return tuple(
        [r for s in sorted(g) for r in by_student[s]] for g in groups
    )


@dataclass
class Batch:
    """Padded window batch: arrays indexed [row, step]."""

    q: np.ndarray  # int64 [B, T] question indices (vocab size = unseen row)
    kc: np.ndarray  # float64 [B, T, N] multi-hot
    y: np.ndarray  # float64 [B, T]
    valid: np.ndarray  # float64 [B, T] 1 on real steps
    loss_mask: np.ndarray  # float64 [B, T] valid steps with >=1 known KC
    students: list  # per-row student id

    @property
    def size(self):
        return self.q.shape


def _encode_windows(records, vocab, max_len):
    """Chunk each student's sequence into windows of <= max_len steps."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    unseen_q = vocab.num_questions
    windows = []
    for student, seq in sorted(student_order(records).items()):
        for start in range(0, len(seq), max_len):
            chunk = seq[start : start + max_len]
            if len(chunk) < 2:
                continue
            q = np.array(
                [vocab.question_index.get(r.question_id, unseen_q) for r in chunk],
                dtype=np.int64,
            )
            kc = np.stack([encode_multihot(r.kc_ids, vocab)[0] for r in chunk])
            y = np.array([r.correct for r in chunk], dtype=np.float64)
            windows.append((student, q, kc, y))
    return windows


def batch_sequences(records, vocab, max_len=DEFAULT_MAX_LEN, batch_size=128):
    """Batches of padded windows; padding carries q=0, y=0, zero multi-hot."""
    windows = _encode_windows(records, vocab, max_len)
    batches = []
    for lo in range(0, len(windows), batch_size):
        group = windows[lo : lo + batch_size]
        b = len(group)
        t_max = max(len(w[1]) for w in group)
        n = vocab.num_kcs
        q = np.zeros((b, t_max), dtype=np.int64)
        kc = np.zeros((b, t_max, n))
        y = np.zeros((b, t_max))
        valid = np.zeros((b, t_max))
        students = []
        for i, (student, qi, kci, yi) in enumerate(group):
            t = len(qi)
            q[i, :t] = qi
            kc[i, :t] = kci
            y[i, :t] = yi
            valid[i, :t] = 1.0
            students.append(student)
        loss_mask = valid * (kc.sum(axis=2) > 0)
        batches.append(Batch(q=q, kc=kc, y=y, valid=valid, loss_mask=loss_mask, students=students))
    return batches
