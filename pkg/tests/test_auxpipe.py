import numpy as np
import pytest

from sbrkt import auxpipe as A
from sbrkt import data as D
from sbrkt import model as M


def tiny_model(variant="alphabeta", num_questions=5, seed=0):
    cfg = M.SBRKTConfig(num_kcs=3, num_aux=4, embed_dim=4, c_max=2,
                        proj_dim=6, hidden_dim=5, variant=variant)
    params = M.SBRKTParams.init(cfg, num_questions, np.random.default_rng(seed))
    vocab = D.Vocab(questions=[f"q{i}" for i in range(num_questions)],
                    kcs=["a", "b", "c"])
    return M.SBRKTModel(config=cfg, params=params, vocab=vocab), vocab


class TestExtractCodes:
    def test_presence_maps_to_membership(self):
        model, vocab = tiny_model()
        # code logits fully controlled: zero weights, fixed bias
        model.params.w_code.value[...] = 0.0
        model.params.b_code.value[...] = [0.9, -0.1, -0.2, 0.8]
        assignment = A.extract_codes(model, vocab)
        assert all(assignment[q] == (0, 3) for q in vocab.questions)

    def test_all_negative_gives_empty_sets(self):
        model, vocab = tiny_model()
        model.params.w_code.value[...] = 0.0
        model.params.b_code.value[...] = -1.0
        assignment = A.extract_codes(model, vocab)
        assert all(assignment[q] == () for q in vocab.questions)

    def test_identical_embeddings_identical_sets(self):
        model, vocab = tiny_model()
        model.params.x_ex.value[2] = model.params.x_ex.value[0]
        assignment = A.extract_codes(model, vocab)
        assert assignment["q0"] == assignment["q2"]

    def test_deterministic(self):
        model, vocab = tiny_model(seed=3)
        assert A.extract_codes(model, vocab) == A.extract_codes(model, vocab)

    def test_size_bound_is_cmax(self):
        model, vocab = tiny_model(seed=4)
        for aux in A.extract_codes(model, vocab).values():
            assert len(aux) <= model.config.c_max

    def test_unseen_row_not_exported(self):
        model, vocab = tiny_model()
        assignment = A.extract_codes(model, vocab)
        assert set(assignment) == set(vocab.questions)

    @pytest.mark.parametrize("variant", ["tanh", "zeroone"])
    def test_discrete_variants_export(self, variant):
        model, vocab = tiny_model(variant=variant)
        model.params.w_code.value[...] = 0.0
        model.params.b_code.value[...] = [2.0, -2.0, 1.0, -1.0]
        assignment = A.extract_codes(model, vocab)
        if variant == "tanh":
            # top-2 mask keeps the two largest logits; both are positive
            assert all(aux == (0, 2) for aux in assignment.values())
        else:
            assert all(aux == (0, 2) for aux in assignment.values())

    def test_dense_rejected(self):
        model, vocab = tiny_model(variant="dense")
        with pytest.raises(A.AuxExtractionError, match="dense variant has no discrete"):
            A.extract_codes(model, vocab)

    def test_roundtrip_through_checkpoint_is_stable(self, tmp_path):
        model, vocab = tiny_model(seed=5)
        before = A.extract_codes(model, vocab)
        M.save_model(model, tmp_path / "m.ckpt")
        back = M.load_model(tmp_path / "m.ckpt")
        assert A.extract_codes(back, back.vocab) == before


class TestAugmentRecords:
    def make(self):
        return [
            D.InteractionRecord("s1", "q0", frozenset({"a"}), 1, 0),
            D.InteractionRecord("s1", "q1", frozenset({"b", "c"}), 0, 1),
        ]

    def test_offset_rule_in_vocab_indices(self):
        recs = self.make()
        augmented = A.augment_records(recs, {"q0": (0, 3), "q1": ()})
        assert augmented[0].kc_ids == frozenset({"a", "AUX0", "AUX3"})
        vocab = D.build_vocab(augmented)
        n = 3  # a, b, c
        for name in ("AUX0", "AUX3"):
            assert vocab.kc_index[name] >= n

    def test_empty_set_leaves_record(self):
        recs = self.make()
        augmented = A.augment_records(recs, {"q0": (), "q1": ()})
        assert augmented == recs

    def test_question_missing_from_assignment(self):
        recs = self.make()
        augmented = A.augment_records(recs, {"q0": (1,)})
        assert augmented[1] == recs[1]

    def test_monotone_original_kcs_preserved(self):
        model, vocab = tiny_model(seed=6)
        recs = self.make()
        augmented = A.augment_records(recs, A.extract_codes(model, vocab))
        for before, after in zip(recs, augmented):
            assert before.kc_ids <= after.kc_ids
            assert len(after.kc_ids) <= len(before.kc_ids) + model.config.c_max

    def test_aux_indices_never_collide_with_originals(self):
        recs = self.make()
        augmented = A.augment_records(recs, {"q0": (0,), "q1": (2,)})
        vocab = D.build_vocab(augmented)
        originals = {vocab.kc_index[k] for k in ("a", "b", "c")}
        aux = {vocab.kc_index[k] for k in ("AUX0", "AUX2")}
        assert originals == {0, 1, 2}
        assert aux.isdisjoint(originals)


class TestAuxCsv:
    def test_roundtrip(self, tmp_path):
        assignment = {"q0": (0, 3), "q1": (), "q2": (2,)}
        path = tmp_path / "aux.csv"
        A.write_aux_csv(assignment, path)
        assert A.read_aux_csv(path) == assignment

    def test_format(self, tmp_path):
        path = tmp_path / "aux.csv"
        A.write_aux_csv({"q1": (0, 3), "q2": ()}, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "question_id,aux_ids"
        assert lines[1] == "q1,0;3"
        assert lines[2] == "q2,"

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("question,codes\nq1,0\n")
        with pytest.raises(ValueError, match="bad aux CSV header"):
            A.read_aux_csv(path)

    def test_aux_name(self):
        assert A.aux_kc_name(7) == "AUX7"
