import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import dataset, patient, visit
from notecode.emr_data import (CodeVocabulary, ConfigurationError, DatasetSplit, IntegrityError, ParseError,
                               SyntheticConfig, UnknownCodeError, build_vocabularies, compute_stats,
                               decode_multi_hot, encode_multi_hot, filter_consistent_codes, generate_synthetic,
                               load_patients, save_patients, split_dataset, split_edges)


def _write(tmp_path, rows):
    path = tmp_path / "patients.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def _row(pid, *visits):
    return {"patient_id": pid, "visits": [
        {"visit_id": v, "admission_time": t, "diagnosis": ["d"], "procedure": ["p"], "medication": ["m"]}
        for v, t in visits]}


class TestLoad:
    def test_counts(self, tmp_path):
        ds = load_patients(_write(tmp_path, [_row("x", ("x1", "2010-01-01")),
                                             _row("y", ("y1", "2010-01-01"), ("y2", "2010-02-01"))]))
        assert len(ds) == 2 and ds.n_visits == 3

    def test_empty_file(self, tmp_path):
        assert len(load_patients(_write(tmp_path, []))) == 0

    def test_visits_resorted(self, tmp_path):
        ds = load_patients(_write(tmp_path, [_row("x", ("late", "2012-05-01"), ("early", "2011-01-01"))]))
        assert [v.visit_id for v in ds.patients[0].visits] == ["early", "late"]

    def test_patients_ordered_by_id(self, tmp_path):
        ds = load_patients(_write(tmp_path, [_row("z", ("z1", "2010-01-01")), _row("a", ("a1", "2010-01-01"))]))
        assert [p.patient_id for p in ds.patients] == ["a", "z"]

    def test_malformed_line_named(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(_row("x", ("x1", "2010-01-01"))) + "\n{not json\n")
        with pytest.raises(ParseError, match="line 2"):
            load_patients(path)

    def test_bad_timestamp(self, tmp_path):
        with pytest.raises(ParseError, match="line 1"):
            load_patients(_write(tmp_path, [_row("x", ("x1", "yesterday"))]))

    def test_duplicate_visit(self, tmp_path):
        with pytest.raises(IntegrityError):
            load_patients(_write(tmp_path, [_row("x", ("v", "2010-01-01"), ("v", "2010-02-01"))]))

    def test_roundtrip(self, tmp_path, tiny_dataset):
        save_patients(tiny_dataset, tmp_path / "out.jsonl")
        assert load_patients(tmp_path / "out.jsonl") == tiny_dataset


class TestVocabularies:
    def test_top_frequency_kept(self):
        ds = dataset(patient("a", visit("1", 0, ("x", "y")), visit("2", 1, ("x", "z"))),
                     patient("b", visit("3", 0, ("x", "y"))))
        _, vocabs, _ = build_vocabularies(ds, max_diagnosis=2)
        assert vocabs["diagnosis"].codes == ["x", "y"]

    def test_identity_when_budget_large(self, tiny_dataset):
        out, vocabs, report = build_vocabularies(tiny_dataset, max_diagnosis=10)
        assert out == tiny_dataset and not report.dropped_visits
        assert vocabs["diagnosis"].codes == ["d1", "d2"]

    def test_tie_goes_to_smaller_code(self):
        ds = dataset(patient("a", visit("1", 0, ("b", "c")), visit("2", 1, ("a",))),
                     patient("b", visit("3", 0, ("b", "c", "a"))))
        # a, b, c each appear twice
        _, vocabs, _ = build_vocabularies(ds, max_diagnosis=2)
        assert vocabs["diagnosis"].codes == ["a", "b"]

    def test_emptied_visit_dropped_and_reported(self):
        ds = dataset(patient("a", visit("1", 0, ("common",)), visit("2", 1, ("rare",))),
                     patient("b", visit("3", 0, ("common",))))
        out, _, report = build_vocabularies(ds, max_diagnosis=1)
        assert report.dropped_visits == ["2"] and out.n_visits == 2

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigurationError):
            build_vocabularies(dataset())

    def test_single_visit_only_code_removed(self):
        ds = dataset(patient("multi", visit("m1", 0, ("shared",)), visit("m2", 1, ("shared",))),
                     patient("single", visit("s1", 0, ("shared", "lonely"))))
        out, vocabs = filter_consistent_codes(ds)
        assert "lonely" not in vocabs["diagnosis"] and "shared" in vocabs["diagnosis"]
        assert out.patients[1].visits[0].diagnosis == {"shared"}

    def test_all_multi_visit_identity(self, tiny_dataset):
        ds = dataset(*[p for p in tiny_dataset.patients if len(p.visits) >= 2])
        assert filter_consistent_codes(ds)[0] == ds

    def test_filter_idempotent(self):
        corpus = generate_synthetic(SyntheticConfig(n_patients=30), seed=3)
        once, _, _ = build_vocabularies(corpus.dataset, 25)
        once, v1 = filter_consistent_codes(once)
        twice, _, _ = build_vocabularies(once, 25)
        twice, v2 = filter_consistent_codes(twice)
        assert once == twice and v1 == v2


class TestMultiHot:
    vocab = CodeVocabulary.from_codes("diagnosis", ["c0", "c1", "c2"])

    def test_examples(self):
        assert encode_multi_hot([], self.vocab).tolist() == [0, 0, 0]
        assert encode_multi_hot({"c0"}, self.vocab).tolist() == [1, 0, 0]
        assert encode_multi_hot({"c0", "c2"}, self.vocab).tolist() == [1, 0, 1]

    def test_unknown_code(self):
        with pytest.raises(UnknownCodeError, match="nope"):
            encode_multi_hot({"nope"}, self.vocab)

    @given(st.sets(st.sampled_from(["c0", "c1", "c2"])))
    def test_bijection(self, codes):
        assert decode_multi_hot(encode_multi_hot(codes, self.vocab), self.vocab) == codes

    def test_vocab_json_roundtrip(self):
        assert CodeVocabulary.from_json(self.vocab.to_json()) == self.vocab


def _n_patients(n):
    return dataset(*[patient(f"p{i:03d}", visit(f"v{i}", i)) for i in range(n)])


class TestSplit:
    def test_sixty(self):
        s = split_dataset(_n_patients(60), 0)
        assert (len(s.train), len(s.validation), len(s.test)) == (40, 10, 10)

    def test_sixty_one(self):
        s = split_dataset(_n_patients(61), 0)
        for got, want in zip((len(s.train), len(s.validation), len(s.test)), (61 * 4 / 6, 61 / 6, 61 / 6)):
            assert abs(got - want) <= 1
        ids = s.train + s.validation + s.test
        assert len(set(ids)) == 61 == len(ids)

    def test_seeded(self):
        ds = _n_patients(20)
        assert split_dataset(ds, 4) == split_dataset(ds, 4)
        assert split_dataset(ds, 4) != split_dataset(ds, 5)

    def test_too_few(self):
        with pytest.raises(ConfigurationError):
            split_dataset(_n_patients(5), 0)

    def test_json_roundtrip(self):
        s = split_dataset(_n_patients(12), 1)
        assert DatasetSplit.from_json(json.loads(json.dumps(s.to_json()))) == s

    def test_edge_rules(self):
        where = {"t": "train", "v": "validation", "x": "test"}
        edges = [("t", "t"), ("v", "v"), ("x", "x"), ("t", "x"), ("v", "t"), ("v", "x")]
        out = split_edges(edges, where)
        assert out["train"] == [("t", "t")]
        assert out["validation"] == [("t", "t"), ("v", "v")]
        assert out["test"] == [("t", "t"), ("x", "x")]


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(SyntheticConfig(n_patients=10), seed=7)
        b = generate_synthetic(SyntheticConfig(n_patients=10), seed=7)
        assert a == b

    def test_planted_tokens_present(self):
        corpus = generate_synthetic(SyntheticConfig(n_patients=20, signal=True), seed=1)
        text = {}
        for rec in corpus.notes:
            if rec["category"] == "Discharge summary":
                text[rec["visit_id"]] = text.get(rec["visit_id"], "") + rec["text"]
        for vid, meds in corpus.planted.items():
            course = text[vid].split("Hospital Course:")[1].split("Discharge Medications:")[0]
            assert meds and all(m in course.split() for m in meds)

    def test_planted_meds_are_true_meds(self):
        corpus = generate_synthetic(SyntheticConfig(n_patients=20, signal=True), seed=2)
        truth = {v.visit_id: v.medication for _, v in corpus.dataset.visits()}
        assert all(m <= truth[v] for v, m in corpus.planted.items())

    def test_single_visit_distribution(self):
        corpus = generate_synthetic(SyntheticConfig(n_patients=15, visit_count_probs=(1.0,)), seed=0)
        assert all(len(p.visits) == 1 for p in corpus.dataset.patients)

    def test_bad_config(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic(SyntheticConfig(n_diagnosis=0), seed=0)


class TestStats:
    def test_single_visit(self):
        s = compute_stats(dataset(patient("a", visit("1", 0, ("x", "y")))))
        assert s.visits_per_patient.avg == 1.0 and s.diagnoses_per_visit.avg == 2.0

    def test_med_average(self):
        s = compute_stats(dataset(patient("a", visit("1", 0, med=("a", "b")), visit("2", 1, med="wxyz"))))
        assert s.medications_per_visit.avg == 3.0 and s.medications_per_visit.max == 4

    def test_notes_only_where_present(self):
        s = compute_stats(dataset(patient("a", visit("1", 0, note="one two three"), visit("2", 1))))
        assert s.n_note_visits == 1 and s.note_length.avg == 3.0 and s.note_length.min == 3.0

    def test_averages_within_bounds(self):
        s = compute_stats(generate_synthetic(SyntheticConfig(n_patients=25), seed=0).dataset)
        for summ in (s.visits_per_patient, s.diagnoses_per_visit, s.procedures_per_visit, s.medications_per_visit):
            assert summ.min <= summ.avg <= summ.max
