"""Command-line pipeline: synth | preprocess | extract | build-graph | train | evaluate | report.

All stages read and write inside one working directory::

    notecode synth --workdir run --patients 50 --seed 7
    notecode preprocess --workdir run
    notecode extract --workdir run
    notecode build-graph --workdir run
    notecode train --workdir run --mode C+T
    notecode evaluate --workdir run --mode C+T
    notecode report --workdir run
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import emr_data, notes, text_repr
from .emr_data import DataError, DatasetSplit, SyntheticConfig
from .metrics import format_csv, format_table
from .model import MODE_ALIASES, MODE_LABELS, ModelConfig
from .pipeline import preprocess, safe_ddi
from .training import (LossConfig, OptimizerConfig, TrainingData, TrainingDivergedError,
                       average_top_checkpoints, evaluate, load_checkpoint, rank_checkpoints,
                       save_checkpoint, train)
from .visit_graph import GraphConfig, build_dataset_graphs, load_graph, save_graph

log = logging.getLogger("notecode")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
CODE_TYPES = emr_data.CODE_TYPES


class StageError(Exception):
    """A prerequisite stage has not been run or its outputs are inconsistent."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    # synth
    patients: int = 50
    signal: bool = True
    signal_fraction: float = 0.3
    # preprocess
    max_diagnosis: int = 2000
    keep_sections: tuple | None = None
    # extract
    backend: str = "stub"
    text_dim: int = 64
    layer: int = 16
    chunk_budget: int = 2048
    section_mode: str = "length_based"
    # graphs
    k_neighbors: int = 10
    # model
    embed_dim: int = 128
    attention_heads: int = 4
    ff_dim: int = 256
    gcn_dropout: float = 0.5
    dropout: float = 0.1
    med_history_via_gcn: bool = False
    # training
    alpha: float = 0.95
    learning_rate: float = 0.003
    epochs: int = 100
    batch_size: int = 256
    warmup_fraction: float = 0.1
    top_k: int = 5
    threshold: float = 0.5
    workers: int = 1

    def validate(self) -> "RunConfig":
        GraphConfig(self.k_neighbors)
        LossConfig(self.alpha)
        self.optimizer()
        self.model("C")
        notes.ChunkingConfig(self.chunk_budget, section_mode=self.section_mode)
        if self.patients < 1 or self.top_k < 1 or self.workers < 1:
            raise ValueError("patients, top_k and workers must be positive")
        return self

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        if d["keep_sections"] is not None:
            d["keep_sections"] = list(d["keep_sections"])
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    def model(self, mode: str) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, text_dim=self.text_dim, attention_heads=self.attention_heads,
                           ff_dim=self.ff_dim, mode=mode, gcn_dropout=self.gcn_dropout, dropout=self.dropout,
                           med_history_via_gcn=self.med_history_via_gcn, seed=self.seed)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.epochs, self.batch_size, self.warmup_fraction, self.seed)


# ---------------------------------------------------------------------------
# Layout helpers


class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    patients = property(lambda s: s.root / "patients.jsonl")
    notes = property(lambda s: s.root / "notes.jsonl")
    ddi = property(lambda s: s.root / "ddi.csv")
    pre = property(lambda s: s.root / "preprocessed")
    dataset = property(lambda s: s.pre / "dataset.jsonl")
    vocab = property(lambda s: s.pre / "vocab.json")
    split = property(lambda s: s.pre / "split.json")
    stats = property(lambda s: s.pre / "stats.json")
    reprs = property(lambda s: s.root / "reprs")
    graphs = property(lambda s: s.root / "graphs")

    def run(self, label: str) -> Path:
        return self.root / "runs" / label

    def require(self, path: Path, stage: str):
        if not path.exists():
            raise StageError(f"{path} not found; run {stage} first")
        return path


def data_hash(wd: Workdir) -> str:
    return hashlib.sha256(wd.require(wd.dataset, "preprocess").read_bytes()).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _provenance(cfg: RunConfig, wd: Workdir | None = None) -> dict:
    out = {"run_config_hash": cfg.hash(), "run_config": cfg.to_json()}
    if wd is not None and wd.dataset.exists():
        out["data_hash"] = data_hash(wd)
    return out


def load_preprocessed(wd: Workdir):
    ds = emr_data.load_patients(wd.require(wd.dataset, "preprocess"))
    vocab_json = json.loads(wd.require(wd.vocab, "preprocess").read_text())
    vocabs = {ct: emr_data.CodeVocabulary.from_json(vocab_json[ct]) for ct in CODE_TYPES}
    split = DatasetSplit.from_json(json.loads(wd.require(wd.split, "preprocess").read_text()))
    return ds, vocabs, split


def load_text(wd: Workdir, ds, required: bool):
    manifest = wd.reprs / text_repr.RepresentationStore.MANIFEST
    if not manifest.exists():
        if required:
            raise StageError("no text representations found; run extract first")
        return None
    store = text_repr.RepresentationStore(wd.reprs)
    ids = [v.visit_id for _, v in ds.visits()]
    missing = [v for v in ids if v not in store.entries]
    if missing:
        raise StageError(f"{len(missing)} visits lack representations; run extract first")
    return store.matrix(ids)


def load_training_data(wd: Workdir, cfg: RunConfig, need_text: bool) -> TrainingData:
    ds, vocabs, split = load_preprocessed(wd)
    graphs = {}
    for ct in CODE_TYPES:
        path = wd.require(wd.graphs / f"{ct}.json", "build-graph")
        graphs[ct] = load_graph(path, ct)
    text = load_text(wd, ds, need_text)
    ddi = None
    if wd.ddi.exists():
        ddi = safe_ddi(emr_data.load_ddi_pairs(wd.ddi), vocabs["medication"])
    return TrainingData.prepare(ds, vocabs, split, graphs, text, ddi)


# ---------------------------------------------------------------------------
# Stages


def cmd_synth(cfg: RunConfig, wd: Workdir, args) -> None:
    synth = SyntheticConfig(n_patients=cfg.patients, signal=cfg.signal, signal_fraction=cfg.signal_fraction)
    corpus = emr_data.generate_synthetic(synth, cfg.seed)
    wd.root.mkdir(parents=True, exist_ok=True)
    emr_data.save_patients(corpus.dataset, wd.patients)
    with open(wd.notes, "w", encoding="utf-8") as fh:
        for rec in corpus.notes:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    emr_data.save_ddi_pairs(corpus.ddi_pairs, wd.ddi)
    print(f"wrote {len(corpus.dataset)} patients, {corpus.dataset.n_visits} visits to {wd.root}")


def cmd_preprocess(cfg: RunConfig, wd: Workdir, args) -> None:
    ds = emr_data.load_patients(wd.require(wd.patients, "synth"))
    notes_by_visit = notes.load_notes(wd.notes) if wd.notes.exists() else None
    pre = preprocess(ds, notes_by_visit, cfg.max_diagnosis, cfg.keep_sections)
    split = emr_data.split_dataset(pre.dataset, cfg.seed)
    wd.pre.mkdir(parents=True, exist_ok=True)
    emr_data.save_patients(pre.dataset, wd.dataset)
    _write_json(wd.vocab, {**{ct: v.to_json() for ct, v in pre.vocabs.items()}, **_provenance(cfg, wd)})
    _write_json(wd.split, {**split.to_json(), **_provenance(cfg, wd)})
    chunking = notes.ChunkingConfig(cfg.chunk_budget, section_mode=cfg.section_mode)
    stats = {
        "all_visits": emr_data.compute_stats(pre.dataset, lambda t: notes.chunk_note(t, chunking)).to_json(),
        "visits_ge_2": emr_data.compute_stats(pre.dataset.multi_visit(2),
                                              lambda t: notes.chunk_note(t, chunking)).to_json(),
        "dropped_visits": len(pre.report.dropped_visits),
        "dropped_patients": len(pre.report.dropped_patients),
        "orphan_notes": len(pre.orphan_notes),
    }
    _write_json(wd.stats, {**stats, **_provenance(cfg, wd)})
    print(f"kept {len(pre.dataset)} patients / {pre.dataset.n_visits} visits; "
          f"dropped {len(pre.report.dropped_visits)} visits, {len(pre.orphan_notes)} orphan notes")


def _provider(cfg: RunConfig):
    backend = os.environ.get("NOTECODE_BACKEND", cfg.backend)
    if backend == "stub":
        return text_repr.stub_provider(seed=cfg.seed, H=cfg.text_dim)
    return text_repr.get_provider(backend)


def cmd_extract(cfg: RunConfig, wd: Workdir, args) -> None:
    ds, _, _ = load_preprocessed(wd)
    provider = _provider(cfg)
    ecfg = text_repr.ExtractionConfig(
        cfg.layer, notes.ChunkingConfig(cfg.chunk_budget, tokenizer=provider.tokenize, section_mode=cfg.section_mode))
    store, report = text_repr.extract_corpus(ds, provider, ecfg, wd.reprs, workers=cfg.workers)
    _write_json(wd.reprs / "provenance.json", _provenance(cfg, wd))
    print(f"extracted {report.extracted}, empty {report.empty}, skipped {report.skipped}, "
          f"failed {len(report.failed)}")


def cmd_build_graph(cfg: RunConfig, wd: Workdir, args) -> None:
    ds, _, _ = load_preprocessed(wd)
    graphs = build_dataset_graphs(ds, GraphConfig(cfg.k_neighbors))
    wd.graphs.mkdir(parents=True, exist_ok=True)
    for ct, g in graphs.items():
        save_graph(g, wd.graphs / f"{ct}.json")
    _write_json(wd.graphs / "provenance.json", _provenance(cfg, wd))
    print(f"wrote {len(graphs)} graphs over {ds.n_visits} visits to {wd.graphs}")


def _label(mode: str) -> str:
    return MODE_LABELS[MODE_ALIASES.get(mode, mode)]


def cmd_train(cfg: RunConfig, wd: Workdir, args) -> None:
    label = _label(args.mode)
    mcfg = cfg.model(label)
    data = load_training_data(wd, cfg, mcfg.uses_text)
    out = wd.run(label)
    if out.exists():
        shutil.rmtree(out)
    (out / "checkpoints").mkdir(parents=True)
    report_fh = open(out / "train_report.jsonl", "w", encoding="utf-8")
    with report_fh:
        checkpoints, report, _ = train(
            mcfg, data, cfg.optimizer(), LossConfig(cfg.alpha),
            on_epoch=lambda rec: report_fh.write(json.dumps(rec, sort_keys=True) + "\n"),
        )
    prov = _provenance(cfg, wd)
    for c in rank_checkpoints(checkpoints)[: cfg.top_k]:
        save_checkpoint(out / "checkpoints" / f"epoch-{c.epoch:04d}.safetensors", c.params,
                        {"config": mcfg.to_json(), "epoch": c.epoch, "val_jaccard": c.val_jaccard, **prov})
    averaged = average_top_checkpoints(checkpoints, cfg.top_k)
    save_checkpoint(out / "averaged.safetensors", averaged,
                    {"config": mcfg.to_json(), "epoch": -1, "val_jaccard": None, "top_k": cfg.top_k, **prov})
    best = rank_checkpoints(checkpoints)[0]
    print(f"trained {label}: best val_jaccard {best.val_jaccard:.4f} at epoch {best.epoch}")


def cmd_evaluate(cfg: RunConfig, wd: Workdir, args) -> None:
    label = _label(args.mode)
    mcfg = cfg.model(label)
    data = load_training_data(wd, cfg, mcfg.uses_text)
    ckpt = wd.require(wd.run(label) / "averaged.safetensors", f"train --mode {label}")
    params, header = load_checkpoint(ckpt)
    mcfg = ModelConfig(**header["config"])
    report = evaluate(params, data, args.phase, config=mcfg, threshold=cfg.threshold)
    out = {"mode": label, "phase": args.phase, "metrics": report.to_json(), **_provenance(cfg, wd)}
    _write_json(wd.run(label) / "metrics.json", out)
    (wd.run(label) / "metrics.txt").write_text(format_table({label: report.to_json()}))
    print(format_table({label: report.to_json()}), end="")


def cmd_report(cfg: RunConfig, wd: Workdir, args) -> None:
    rows, hashes = {}, set()
    for label in ("C", "T", "C+T"):
        path = wd.run(label) / "metrics.json"
        if not path.exists():
            continue
        obj = json.loads(path.read_text())
        hashes.add(obj.get("data_hash"))
        rows[label] = obj["metrics"]
    if not rows:
        raise StageError("no metrics found; run evaluate first")
    if len(hashes) != 1:
        raise StageError("metrics were computed on different datasets; re-run evaluate for every mode")
    table = format_table(rows)
    (wd.root / "report.md").write_text(table)
    (wd.root / "report.csv").write_text(format_csv(rows))
    print(table, end="")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "extract": cmd_extract,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag_name(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="notecode", description="Note-augmented medication recommendation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--workdir", default=".", help="directory holding all stage inputs and outputs")
        p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
        for f in fields(RunConfig):
            if f.name == "keep_sections":
                p.add_argument("--keep-sections", nargs="*", default=None)
            elif f.type in ("bool", bool):
                p.add_argument(_flag_name(f.name), action=argparse.BooleanOptionalAction, default=None)
            else:
                conv = {"int": int, "float": float, "str": str}[str(f.type)]
                p.add_argument(_flag_name(f.name), type=conv, default=None)
        if name in ("train", "evaluate"):
            p.add_argument("--mode", required=True, choices=["C", "T", "C+T"])
        if name == "evaluate":
            p.add_argument("--phase", default="test", choices=["validation", "test"])
    return parser


def resolve_config(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    unknown = set(values) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if values.get("keep_sections") is not None:
        values["keep_sections"] = tuple(values["keep_sections"])
    env_workers = os.environ.get("NOTECODE_WORKERS")
    if env_workers and "workers" not in values:
        values["workers"] = int(env_workers)
    return RunConfig(**values).validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and on usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ValueError, TypeError, json.JSONDecodeError, OSError) as exc:
        print(f"notecode: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps({"command": args.command, "config": cfg.to_json()}, sort_keys=True))
    try:
        COMMANDS[args.command](cfg, Workdir(args.workdir), args)
    except (StageError, DataError, KeyError, FileNotFoundError, emr_data.ConfigurationError) as exc:
        print(f"notecode: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        if "extract first" in str(exc):
            print(f"notecode: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"notecode: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TrainingDivergedError, RuntimeError) as exc:
        print(f"notecode: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
