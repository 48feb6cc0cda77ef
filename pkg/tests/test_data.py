import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sbrkt import data as D


def parse(text):
    return D.parse_interactions(io.StringIO(text))


HEADER = "student_id,question_id,kc_ids,correct\n"


class TestParse:
    def test_single_row(self):
        res = parse(HEADER + "s1,q1,k1;k2,1\n")
        assert len(res.records) == 1
        rec = res.records[0]
        assert rec.kc_ids == frozenset({"k1", "k2"})
        assert rec.correct == 1

    def test_bad_correct_value(self):
        with pytest.raises(D.ParseError, match="line 2"):
            parse(HEADER + "s1,q1,k1,2\n")

    def test_interleaved_order_keys(self):
        res = parse(HEADER + "s1,q1,k1,1\ns2,q2,k1,0\ns1,q3,k1,1\ns2,q4,k1,1\ns1,q5,k1,0\n")
        keys = {r.student_id: [] for r in res.records}
        for r in res.records:
            keys[r.student_id].append(r.order_key)
        assert keys["s1"] == [0, 1, 2]
        assert keys["s2"] == [0, 1]

    def test_empty_kc_rows_dropped_and_counted(self):
        res = parse(HEADER + "s1,q1,,1\ns1,q2,k1,0\n")
        assert len(res.records) == 1
        assert res.dropped_no_kc == 1

    def test_bad_header(self):
        with pytest.raises(D.ParseError, match="header"):
            parse("a,b,c,d\ns1,q1,k1,1\n")


class TestVocab:
    def test_sorted_indices(self):
        res = parse(HEADER + "s1,qb,k2,1\ns1,qa,k1,0\n")
        vocab = D.build_vocab(res.records)
        assert vocab.question_index == {"qa": 0, "qb": 1}
        assert vocab.kc_index == {"k1": 0, "k2": 1}

    def test_single_record(self):
        res = parse(HEADER + "s1,q1,k1;k2;k3,1\n")
        vocab = D.build_vocab(res.records)
        assert vocab.num_questions == 1
        assert vocab.num_kcs == 3

    def test_duplicates_indexed_once(self):
        res = parse(HEADER + "s1,q1,k1,1\ns2,q1,k1,0\n")
        vocab = D.build_vocab(res.records)
        assert vocab.num_questions == 1 and vocab.num_kcs == 1

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            D.build_vocab([])

    def test_aux_ids_sort_after_originals(self):
        res = parse(HEADER + "s1,q1,k1;AUX0;AUX10;AUX2;zz,1\n")
        vocab = D.build_vocab(res.records)
        assert vocab.kcs == ["k1", "zz", "AUX0", "AUX2", "AUX10"]

    def test_json_roundtrip(self):
        vocab = D.Vocab(questions=["q1", "q2"], kcs=["k1"])
        back = D.Vocab.from_json(vocab.to_json())
        assert back.questions == vocab.questions and back.kcs == vocab.kcs


class TestEncode:
    def setup_method(self):
        self.vocab = D.Vocab(questions=["q"], kcs=["a", "b", "c", "d"])

    def test_multihot(self):
        vec, unknown = D.encode_multihot({"a", "c"}, self.vocab)
        assert vec.tolist() == [1, 0, 1, 0]
        assert unknown == 0

    def test_all_unknown_flagged(self):
        vec, unknown = D.encode_multihot({"x", "y"}, self.vocab)
        assert vec.tolist() == [0, 0, 0, 0]
        assert unknown == 2

    def test_all_present(self):
        vec, _ = D.encode_multihot({"a", "b", "c", "d"}, self.vocab)
        assert vec.tolist() == [1, 1, 1, 1]


class TestAttachLabel:
    def test_correct(self):
        assert D.attach_label([1, 0, 1], 1).tolist() == [1, 0, 1, 0, 0, 0]

    def test_incorrect(self):
        assert D.attach_label([1, 0, 1], 0).tolist() == [0, 0, 0, 1, 0, 1]

    def test_real_valued(self):
        assert D.attach_label([1.5, 0.5], 0).tolist() == [0, 0, 1.5, 0.5]

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=16), st.integers(0, 1))
    def test_popcount_preserved(self, bits, y):
        u = np.array(bits, dtype=float)
        out = D.attach_label(u, y)
        assert out.sum() == u.sum()
        assert len(out) == 2 * len(u)


def make_records(n_students, steps=5):
    rows = []
    for s in range(n_students):
        for t in range(steps):
            rows.append(f"s{s:03d},q{t},k{t % 3},{t % 2}")
    return parse(HEADER + "\n".join(rows) + "\n").records


class TestSplit:
    def test_8_1_1(self):
        train, val, test = D.split_students(make_records(10), seed=0)
        counts = [len({r.student_id for r in part}) for part in (train, val, test)]
        assert counts == [8, 1, 1]

    def test_deterministic(self):
        recs = make_records(10)
        a = D.split_students(recs, seed=5)
        b = D.split_students(recs, seed=5)
        assert a == b

    def test_three_students(self):
        train, val, test = D.split_students(make_records(3), seed=0)
        counts = [len({r.student_id for r in part}) for part in (train, val, test)]
        assert counts == [1, 1, 1]

    def test_too_few(self):
        with pytest.raises(ValueError):
            D.split_students(make_records(2), seed=0)

    def test_partition(self):
        recs = make_records(17)
        train, val, test = D.split_students(recs, seed=3)
        all_students = {r.student_id for r in recs}
        parts = [{r.student_id for r in p} for p in (train, val, test)]
        assert parts[0] | parts[1] | parts[2] == all_students
        assert not (parts[0] & parts[1]) and not (parts[1] & parts[2]) and not (parts[0] & parts[2])


class TestBatching:
    def test_windows(self):
        recs = make_records(1, steps=5)
        vocab = D.build_vocab(recs)
        batches = D.batch_sequences(recs, vocab, max_len=3, batch_size=128)
        lengths = sorted(int(v.sum()) for v in batches[0].valid)
        assert lengths == [2, 3]

    def test_single_step_dropped(self):
        recs = make_records(1, steps=1)
        vocab = D.build_vocab(recs)
        assert D.batch_sequences(recs, vocab) == []

    def test_batch_splitting(self):
        recs = make_records(130, steps=2)
        vocab = D.build_vocab(recs)
        batches = D.batch_sequences(recs, vocab, max_len=200, batch_size=128)
        assert [b.q.shape[0] for b in batches] == [128, 2]

    def test_padding_masked(self):
        recs = make_records(2, steps=5) + make_records(1, steps=3)[:3]
        vocab = D.build_vocab(recs)
        batch = D.batch_sequences(recs, vocab, max_len=200)[0]
        pad = batch.valid == 0
        assert (batch.q[pad] == 0).all()
        assert (batch.y[pad] == 0).all()
        assert (batch.kc[pad] == 0).all()

    def test_multiset_preserved(self):
        recs = make_records(5, steps=7)
        vocab = D.build_vocab(recs)
        batches = D.batch_sequences(recs, vocab, max_len=4)
        total_steps = sum(int(b.valid.sum()) for b in batches)
        assert total_steps == len(recs)
