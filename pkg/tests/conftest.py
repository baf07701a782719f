from __future__ import annotations

import sys
from datetime import datetime, timedelta
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from notecode.emr_data import PatientRecord, VisitRecord, make_dataset  # noqa: E402

T0 = datetime(2010, 1, 1)


def visit(vid, day, diag=("d1",), proc=("p1",), med=("m1",), note=None):
    return VisitRecord(vid, T0 + timedelta(days=day), frozenset(diag), frozenset(proc), frozenset(med), note)


def patient(pid, *visits):
    return PatientRecord(pid, tuple(visits))


def dataset(*patients):
    return make_dataset(patients)


@pytest.fixture
def tiny_dataset():
    return dataset(
        patient("a", visit("a1", 0, ("d1", "d2"), ("p1",), ("m1",)),
                visit("a2", 30, ("d1",), ("p1", "p2"), ("m1", "m2"))),
        patient("b", visit("b1", 5, ("d2",), ("p2",), ("m2",))),
    )


def synthetic_data(n_patients=40, seed=0, text_dim=16, signal=True, signal_fraction=0.3, k_neighbors=10):
    """Run the in-memory preprocessing chain on a synthetic corpus."""
    from notecode.emr_data import SyntheticConfig, generate_synthetic, split_dataset
    from notecode.pipeline import group_notes, preprocess, representation_matrix, safe_ddi
    from notecode.text_repr import stub_provider
    from notecode.training import TrainingData
    from notecode.visit_graph import GraphConfig, build_dataset_graphs

    corpus = generate_synthetic(SyntheticConfig(n_patients=n_patients, signal=signal,
                                                signal_fraction=signal_fraction), seed)
    pre = preprocess(corpus.dataset, group_notes(corpus.notes))
    text = representation_matrix(pre.dataset, stub_provider(seed=seed, H=text_dim))
    return TrainingData.prepare(pre.dataset, pre.vocabs, split_dataset(pre.dataset, seed),
                                build_dataset_graphs(pre.dataset, GraphConfig(k_neighbors)), text,
                                safe_ddi(corpus.ddi_pairs, pre.vocabs["medication"]))


@pytest.fixture(scope="session")
def small_data():
    return synthetic_data()


# -- acceptance bookkeeping: one PASS/FAIL line per criterion --------------

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), title, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} ({detail})")
