"""In-memory end-to-end runs: corpus -> preprocessing -> extraction -> graphs -> training -> metrics."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .emr_data import (CodeVocabulary, Dataset, DatasetSplit, FilterReport, SyntheticConfig,
                       build_vocabularies, filter_consistent_codes, generate_synthetic, split_dataset)
from .metrics import MetricsReport
from .model import MODE_LABELS, ModelConfig, resolve_mode
from .notes import ChunkingConfig, attach_notes, clean_note_records
from .text_repr import ExtractionConfig, HiddenStateProvider, MissingNoteError, visit_representation
from .training import (LossConfig, OptimizerConfig, TrainingData, average_top_checkpoints, evaluate,
                       phase_jaccard, train)
from .visit_graph import GraphConfig, build_dataset_graphs, build_ddi_matrix


def group_notes(records: Iterable[Mapping], categories=("Discharge summary",)) -> dict[str, list[str]]:
    cats = {c.lower() for c in categories}
    out: dict[str, list[str]] = {}
    for r in records:
        if str(r.get("category", "")).lower() in cats:
            out.setdefault(str(r["visit_id"]), []).append(r["text"])
    return out


@dataclass
class Preprocessed:
    dataset: Dataset
    vocabs: dict[str, CodeVocabulary]
    report: FilterReport
    orphan_notes: list[str] = field(default_factory=list)


def preprocess(dataset: Dataset, notes_by_visit: Mapping[str, Sequence[str]] | None = None,
               max_diagnosis: int = 2000, keep_sections=None) -> Preprocessed:
    ds, _, report = build_vocabularies(dataset, max_diagnosis)
    ds, vocabs = filter_consistent_codes(ds, report)
    orphans: list[str] = []
    if notes_by_visit is not None:
        ds, attach = attach_notes(ds, notes_by_visit, clean=lambda r: clean_note_records(r, keep=keep_sections))
        orphans = attach.orphans
    return Preprocessed(ds, vocabs, report, orphans)


def representation_matrix(dataset: Dataset, provider: HiddenStateProvider,
                          cfg: ExtractionConfig = ExtractionConfig()) -> np.ndarray:
    rows = []
    for _, v in dataset.visits():
        try:
            rows.append(visit_representation(provider, v.note, cfg))
        except MissingNoteError:
            rows.append(np.zeros(provider.hidden_dim))
    return np.asarray(rows, dtype=np.float32).reshape(len(rows), provider.hidden_dim)


def safe_ddi(pairs, vocab: CodeVocabulary) -> np.ndarray:
    """DDI matrix over the vocabulary, ignoring pairs whose drugs were filtered out."""
    return build_ddi_matrix([(a, b) for a, b in pairs if a in vocab and b in vocab], vocab)


@dataclass
class ModeResult:
    mode: str
    report: MetricsReport
    best_val_jaccard: float
    averaged_val_jaccard: float
    train_jaccard: float


def run_modes(data: TrainingData, modes: Sequence[str], model_cfg: ModelConfig, opt: OptimizerConfig,
              loss_cfg: LossConfig, top_k: int = 5, phase: str = "test") -> dict[str, ModeResult]:
    results = {}
    for mode in modes:
        cfg = replace(model_cfg, mode=resolve_mode(mode))
        checkpoints, _, model = train(cfg, data, opt, loss_cfg)
        params = average_top_checkpoints(checkpoints, top_k)
        results[MODE_LABELS[cfg.mode]] = ModeResult(
            mode=MODE_LABELS[cfg.mode],
            report=evaluate(params, data, phase, config=cfg),
            best_val_jaccard=max(c.val_jaccard for c in checkpoints),
            averaged_val_jaccard=evaluate(params, data, "validation", config=cfg).jaccard,
            train_jaccard=phase_jaccard(model, data, "train", min_visits=2),
        )
    return results


def synthetic_experiment(seed: int, synth: SyntheticConfig, model_cfg: ModelConfig,
                         opt: OptimizerConfig, loss_cfg: LossConfig = LossConfig(),
                         provider: HiddenStateProvider | None = None, graph_cfg: GraphConfig = GraphConfig(),
                         modes: Sequence[str] = ("C", "T", "C+T"),
                         chunking: ChunkingConfig = ChunkingConfig()) -> dict[str, ModeResult]:
    """Generate a corpus with ``seed`` and train/evaluate each mode on its held-out test split."""
    from .text_repr import stub_provider

    corpus = generate_synthetic(synth, seed)
    pre = preprocess(corpus.dataset, group_notes(corpus.notes))
    provider = provider or stub_provider(seed=seed, H=model_cfg.text_dim)
    text = representation_matrix(pre.dataset, provider, ExtractionConfig(chunking=chunking))
    split = split_dataset(pre.dataset, seed)
    graphs = build_dataset_graphs(pre.dataset, graph_cfg)
    data = TrainingData.prepare(pre.dataset, pre.vocabs, split, graphs, text,
                                safe_ddi(corpus.ddi_pairs, pre.vocabs["medication"]))
    return run_modes(data, modes, replace(model_cfg, seed=seed), replace(opt, seed=seed), loss_cfg)
