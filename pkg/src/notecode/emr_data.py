"""EMR records, code vocabularies, preprocessing filters, splits and a synthetic corpus."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CODE_TYPES = ("diagnosis", "procedure", "medication")
SPLITS = ("train", "validation", "test")


class DataError(Exception):
    """Base class for malformed or inconsistent input data."""


class ParseError(DataError):
    pass


class IntegrityError(DataError):
    pass


class ConfigurationError(ValueError):
    pass


class UnknownCodeError(KeyError):
    def __str__(self):
        return f"unknown code: {self.args[0]!r}"


@dataclass(frozen=True)
class CodeVocabulary:
    code_type: str
    code_to_index: Mapping[str, int]

    @classmethod
    def from_codes(cls, code_type: str, codes: Iterable[str]) -> "CodeVocabulary":
        if code_type not in CODE_TYPES:
            raise ConfigurationError(f"unknown code type {code_type!r}")
        ordered = sorted(set(codes))
        return cls(code_type, {c: i for i, c in enumerate(ordered)})

    @property
    def size(self) -> int:
        return len(self.code_to_index)

    @property
    def codes(self) -> list[str]:
        return sorted(self.code_to_index, key=self.code_to_index.__getitem__)

    def index(self, code: str) -> int:
        try:
            return self.code_to_index[code]
        except KeyError:
            raise UnknownCodeError(code) from None

    def __contains__(self, code) -> bool:
        return code in self.code_to_index

    def __len__(self) -> int:
        return self.size

    def to_json(self) -> dict:
        return {"code_type": self.code_type, "codes": self.codes}

    @classmethod
    def from_json(cls, obj: dict) -> "CodeVocabulary":
        return cls(obj["code_type"], {c: i for i, c in enumerate(obj["codes"])})


@dataclass(frozen=True)
class VisitRecord:
    visit_id: str
    admission_time: datetime
    diagnosis: frozenset = frozenset()
    procedure: frozenset = frozenset()
    medication: frozenset = frozenset()
    note: str | None = None

    def codes(self, code_type: str) -> frozenset:
        return getattr(self, code_type)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[VisitRecord, ...]


@dataclass(frozen=True)
class Dataset:
    patients: tuple[PatientRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    @property
    def n_visits(self) -> int:
        return sum(len(p.visits) for p in self.patients)

    def visits(self) -> list[tuple[str, VisitRecord]]:
        """All visits in node order: patients by id, then admission time."""
        return [(p.patient_id, v) for p in self.patients for v in p.visits]

    def patient_of_visit(self) -> dict[str, str]:
        return {v.visit_id: pid for pid, v in self.visits()}

    def subset(self, patient_ids: Iterable[str]) -> "Dataset":
        keep = set(patient_ids)
        return Dataset(tuple(p for p in self.patients if p.patient_id in keep))

    def multi_visit(self, min_visits: int = 2) -> "Dataset":
        return Dataset(tuple(p for p in self.patients if len(p.visits) >= min_visits))


def make_dataset(patients: Iterable[PatientRecord]) -> Dataset:
    """Canonical ordering: patients by id, visits by (admission_time, visit_id)."""
    ordered = []
    for p in sorted(patients, key=lambda p: p.patient_id):
        visits = tuple(sorted(p.visits, key=lambda v: (v.admission_time, v.visit_id)))
        ordered.append(PatientRecord(p.patient_id, visits))
    return Dataset(tuple(ordered))


# ---------------------------------------------------------------------------
# I/O


def _parse_time(value: str, lineno: int) -> datetime:
    try:
        return datetime.fromisoformat(value)
    except (TypeError, ValueError):
        raise ParseError(f"line {lineno}: bad admission_time {value!r}") from None


def _parse_patient(obj, lineno: int) -> PatientRecord:
    if not isinstance(obj, dict) or "patient_id" not in obj or "visits" not in obj:
        raise ParseError(f"line {lineno}: expected object with patient_id and visits")
    visits = []
    for v in obj["visits"]:
        try:
            visits.append(
                VisitRecord(
                    visit_id=str(v["visit_id"]),
                    admission_time=_parse_time(v["admission_time"], lineno),
                    diagnosis=frozenset(map(str, v.get("diagnosis", []))),
                    procedure=frozenset(map(str, v.get("procedure", []))),
                    medication=frozenset(map(str, v.get("medication", []))),
                    note=v.get("note"),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"line {lineno}: malformed visit ({exc})") from None
    return PatientRecord(str(obj["patient_id"]), tuple(visits))


def load_patients(path, format: str = "jsonl") -> Dataset:
    """Read a patients file.

    Visit ids must be unique across the whole file, since notes and graph
    nodes are keyed by visit id alone.
    """
    if format != "jsonl":
        raise ConfigurationError(f"unsupported format {format!r}")
    patients = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc.msg}") from None
            patient = _parse_patient(obj, lineno)
            for v in patient.visits:
                if v.visit_id in seen:
                    raise IntegrityError(
                        f"line {lineno}: duplicate visit {v.visit_id!r} (patient {patient.patient_id!r})"
                    )
                seen.add(v.visit_id)
            patients.append(patient)
    ids = [p.patient_id for p in patients]
    if len(set(ids)) != len(ids):
        dup = next(i for i, c in Counter(ids).items() if c > 1)
        raise IntegrityError(f"duplicate patient_id {dup!r}")
    return make_dataset(patients)


def patient_to_json(p: PatientRecord) -> dict:
    return {
        "patient_id": p.patient_id,
        "visits": [
            {
                "visit_id": v.visit_id,
                "admission_time": v.admission_time.isoformat(),
                "diagnosis": sorted(v.diagnosis),
                "procedure": sorted(v.procedure),
                "medication": sorted(v.medication),
                "note": v.note,
            }
            for v in p.visits
        ],
    }


def save_patients(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in dataset.patients:
            fh.write(json.dumps(patient_to_json(p), sort_keys=True) + "\n")


def load_ddi_pairs(path) -> list[tuple[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"med_a", "med_b"}:
            raise ParseError("ddi file must have header med_a,med_b")
        return [(row["med_a"], row["med_b"]) for row in reader]


def save_ddi_pairs(pairs: Iterable[tuple[str, str]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["med_a", "med_b"])
        for a, b in pairs:
            writer.writerow([a, b])


# ---------------------------------------------------------------------------
# Vocabularies and filters


@dataclass
class FilterReport:
    dropped_visits: list[str] = field(default_factory=list)
    dropped_patients: list[str] = field(default_factory=list)


def _restrict(dataset: Dataset, keep: Mapping[str, set], report: FilterReport) -> Dataset:
    patients = []
    for p in dataset.patients:
        visits = []
        for v in p.visits:
            nv = replace(v, **{ct: v.codes(ct) & keep[ct] for ct in CODE_TYPES})
            # A visit with any code set emptied would violate the non-empty invariant.
            if all(nv.codes(ct) for ct in CODE_TYPES):
                visits.append(nv)
            else:
                report.dropped_visits.append(v.visit_id)
        if visits:
            patients.append(PatientRecord(p.patient_id, tuple(visits)))
        else:
            report.dropped_patients.append(p.patient_id)
    return Dataset(tuple(patients))


def vocabularies_from(dataset: Dataset) -> dict[str, CodeVocabulary]:
    return {
        ct: CodeVocabulary.from_codes(ct, (c for _, v in dataset.visits() for c in v.codes(ct)))
        for ct in CODE_TYPES
    }


def build_vocabularies(dataset: Dataset, max_diagnosis: int = 2000):
    """Keep the ``max_diagnosis`` most frequent diagnoses and all other codes.

    Frequency ties at the cutoff go to the lexicographically smaller code.
    Returns ``(filtered_dataset, vocabularies, report)``.
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot build vocabularies from an empty dataset")
    freq = Counter(c for _, v in dataset.visits() for c in v.diagnosis)
    ranked = sorted(freq, key=lambda c: (-freq[c], c))
    keep = {
        "diagnosis": set(ranked[:max_diagnosis]),
        "procedure": {c for _, v in dataset.visits() for c in v.procedure},
        "medication": {c for _, v in dataset.visits() for c in v.medication},
    }
    report = FilterReport()
    filtered = _restrict(dataset, keep, report)
    return filtered, vocabularies_from(filtered), report


def filter_consistent_codes(dataset: Dataset, report: FilterReport | None = None):
    """Keep codes seen both in the whole corpus and among patients with >= 2 visits.

    Dropping visits can change which patients qualify as multi-visit, so the
    filter is iterated to a fixed point. Returns ``(dataset, vocabularies)``.
    """
    report = report if report is not None else FilterReport()
    while True:
        multi = dataset.multi_visit(2)
        keep = {}
        for ct in CODE_TYPES:
            everywhere = {c for _, v in dataset.visits() for c in v.codes(ct)}
            in_multi = {c for _, v in multi.visits() for c in v.codes(ct)}
            keep[ct] = everywhere & in_multi
        filtered = _restrict(dataset, keep, report)
        if filtered == dataset:
            return filtered, vocabularies_from(filtered)
        dataset = filtered


def encode_multi_hot(codes: Iterable[str], vocab: CodeVocabulary) -> np.ndarray:
    vec = np.zeros(vocab.size, dtype=np.float32)
    for c in codes:
        vec[vocab.index(c)] = 1.0
    return vec


def decode_multi_hot(vec, vocab: CodeVocabulary) -> frozenset:
    codes = vocab.codes
    return frozenset(codes[i] for i in np.flatnonzero(np.asarray(vec)))


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class DatasetSplit:
    seed: int
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def membership(self) -> dict[str, str]:
        out = {}
        for name in SPLITS:
            for pid in getattr(self, name):
                out[pid] = name
        return out

    def to_json(self) -> dict:
        return {"seed": self.seed, "train": list(self.train),
                "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_json(cls, obj) -> "DatasetSplit":
        return cls(int(obj["seed"]), tuple(obj["train"]), tuple(obj["validation"]), tuple(obj["test"]))


def split_dataset(dataset: Dataset, seed: int) -> DatasetSplit:
    """Seeded patient-level 4:1:1 split."""
    n = len(dataset)
    if n < 6:
        raise ConfigurationError(f"need at least 6 patients to split 4:1:1, got {n}")
    ids = sorted(p.patient_id for p in dataset.patients)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = int(round(n * 4 / 6))
    n_val = int(round(n / 6))
    return DatasetSplit(
        seed,
        tuple(shuffled[:n_train]),
        tuple(shuffled[n_train:n_train + n_val]),
        tuple(shuffled[n_train + n_val:]),
    )


def split_edges(edges: Iterable[tuple], node_split: Mapping) -> dict[str, list[tuple]]:
    """Assign (src, dst, ...) edges to phases.

    Train edges need both ends in train and are shared by every phase;
    validation/test additionally get edges lying wholly inside themselves.
    Edges crossing splits are dropped.
    """
    out = {name: [] for name in SPLITS}
    for edge in edges:
        a, b = node_split[edge[0]], node_split[edge[1]]
        if a != b:
            continue
        if a == "train":
            for name in SPLITS:
                out[name].append(edge)
        else:
            out[a].append(edge)
    return out


# ---------------------------------------------------------------------------
# Statistics


@dataclass(frozen=True)
class Summary:
    avg: float
    min: float
    max: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "Summary":
        if len(values) == 0:
            return cls(0.0, 0.0, 0.0)
        arr = np.asarray(values, dtype=np.float64)
        return cls(float(arr.mean()), float(arr.min()), float(arr.max()))


@dataclass(frozen=True)
class DatasetStats:
    n_patients: int
    n_visits: int
    space_size: dict
    visits_per_patient: Summary
    diagnoses_per_visit: Summary
    procedures_per_visit: Summary
    medications_per_visit: Summary
    n_note_visits: int
    n_note_patients: int
    note_length: Summary
    chunks_per_note: Summary | None = None
    chunk_length: Summary | None = None

    def to_json(self) -> dict:
        from dataclasses import asdict
        return asdict(self)


def compute_stats(dataset: Dataset, chunker=None, tokenize=str.split) -> DatasetStats:
    """Table-style corpus statistics; note statistics cover visits that have notes.

    ``chunker`` maps note text to a list of chunks with ``token_count``.
    """
    visits = [v for _, v in dataset.visits()]
    noted = [(pid, v) for pid, v in dataset.visits() if v.note]
    chunk_counts, chunk_lengths = [], []
    if chunker is not None:
        for _, v in noted:
            chunks = chunker(v.note)
            chunk_counts.append(len(chunks))
            chunk_lengths.extend(c.token_count for c in chunks)
    return DatasetStats(
        n_patients=len(dataset),
        n_visits=len(visits),
        space_size={ct: len({c for v in visits for c in v.codes(ct)}) for ct in CODE_TYPES},
        visits_per_patient=Summary.of([len(p.visits) for p in dataset.patients]),
        diagnoses_per_visit=Summary.of([len(v.diagnosis) for v in visits]),
        procedures_per_visit=Summary.of([len(v.procedure) for v in visits]),
        medications_per_visit=Summary.of([len(v.medication) for v in visits]),
        n_note_visits=len(noted),
        n_note_patients=len({pid for pid, _ in noted}),
        note_length=Summary.of([len(tokenize(v.note)) for _, v in noted]),
        chunks_per_note=Summary.of(chunk_counts) if chunker is not None else None,
        chunk_length=Summary.of(chunk_lengths) if chunker is not None else None,
    )


# ---------------------------------------------------------------------------
# Synthetic corpus

_FILLER = (
    "stable afebrile comfortable ambulating tolerating diet pain controlled "
    "vitals within normal limits labs reviewed imaging unremarkable follow up "
    "with primary care wound clean dry intact oxygen saturation adequate "
    "mild edema noted improved overnight family updated at bedside"
).split()


@dataclass(frozen=True)
class SyntheticConfig:
    n_patients: int = 50
    # probability of a patient having 1, 2, ... visits
    visit_count_probs: tuple[float, ...] = (0.2, 0.3, 0.3, 0.2)
    n_diagnosis: int = 40
    n_procedure: int = 20
    n_medication: int = 24
    # the last ``n_text_only_meds`` medications are not linked to any code
    n_text_only_meds: int = 8
    chronic_diagnoses: int = 2
    acute_diagnoses: tuple[int, int] = (1, 2)
    procedures_per_visit: tuple[int, int] = (1, 2)
    text_only_meds_per_visit: int = 2
    signal: bool = False
    # share of code-linked medications also mentioned in the note when signal is on
    signal_fraction: float = 0.5
    filler_sentences: tuple[int, int] = (2, 4)
    note_missing_rate: float = 0.0
    split_note_rate: float = 0.1
    ddi_density: float = 0.05

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ConfigurationError("n_patients must be positive")
        if min(self.n_diagnosis, self.n_procedure, self.n_medication) < 1:
            raise ConfigurationError("code spaces must be non-empty")
        if not self.visit_count_probs or any(p < 0 for p in self.visit_count_probs) \
                or not math.isclose(sum(self.visit_count_probs), 1.0, abs_tol=1e-9):
            raise ConfigurationError("visit_count_probs must be a probability vector")
        if not 0 <= self.n_text_only_meds < self.n_medication:
            raise ConfigurationError("n_text_only_meds must leave at least one code-linked medication")
        if self.text_only_meds_per_visit > self.n_text_only_meds:
            raise ConfigurationError("text_only_meds_per_visit exceeds the text-only pool")
        if self.chronic_diagnoses + self.acute_diagnoses[1] > self.n_diagnosis:
            raise ConfigurationError("too many diagnoses per visit for the code space")
        if self.procedures_per_visit[1] > self.n_procedure or self.procedures_per_visit[0] < 1:
            raise ConfigurationError("bad procedures_per_visit")
        if not 0.0 <= self.signal_fraction <= 1.0:
            raise ConfigurationError("signal_fraction must lie in [0, 1]")


def medication_code(k: int) -> str:
    return f"MED{k}"


@dataclass(frozen=True)
class SyntheticCorpus:
    dataset: Dataset
    notes: list[dict]
    ddi_pairs: list[tuple[str, str]]
    # medication codes mentioned in each visit's note (the planted signal)
    planted: dict[str, frozenset]


def generate_synthetic(config: SyntheticConfig, seed: int) -> SyntheticCorpus:
    """Seeded synthetic EMR corpus.

    Every diagnosis maps to one code-linked medication, so those drugs are
    predictable from codes. Text-only medications are drawn at random per
    visit; with ``signal`` on, the hospital-course section names all of them
    plus a ``signal_fraction`` share of the code-linked ones.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n_linked = config.n_medication - config.n_text_only_meds
    diag_to_med = rng.integers(0, n_linked, size=config.n_diagnosis)
    diag_codes = [f"D{i:03d}" for i in range(config.n_diagnosis)]
    proc_codes = [f"P{i:03d}" for i in range(config.n_procedure)]
    counts = np.arange(1, len(config.visit_count_probs) + 1)
    base = datetime(2001, 1, 1)

    patients, notes, planted = [], [], {}
    for pi in range(config.n_patients):
        pid = f"p{pi:05d}"
        n_visits = int(rng.choice(counts, p=np.asarray(config.visit_count_probs)))
        chronic = rng.choice(config.n_diagnosis, size=config.chronic_diagnoses, replace=False)
        t = base + timedelta(days=int(rng.integers(0, 3650)), hours=int(rng.integers(0, 24)))
        visits = []
        for vi in range(n_visits):
            vid = f"{pid}_v{vi}"
            pool = np.setdiff1d(np.arange(config.n_diagnosis), chronic)
            n_acute = int(rng.integers(config.acute_diagnoses[0], config.acute_diagnoses[1] + 1))
            acute = rng.choice(pool, size=n_acute, replace=False)
            diag = np.concatenate([chronic, acute])
            n_proc = int(rng.integers(config.procedures_per_visit[0], config.procedures_per_visit[1] + 1))
            proc = rng.choice(config.n_procedure, size=n_proc, replace=False)
            linked = sorted({int(diag_to_med[d]) for d in diag})
            text_only = rng.choice(
                np.arange(n_linked, config.n_medication),
                size=config.text_only_meds_per_visit, replace=False,
            )
            meds = sorted(set(linked) | {int(m) for m in text_only})
            hinted: set[int] = set()
            if config.signal:
                hinted = {int(m) for m in text_only}
                hinted |= {m for m in linked if rng.random() < config.signal_fraction}
            visits.append(
                VisitRecord(
                    visit_id=vid,
                    admission_time=t,
                    diagnosis=frozenset(diag_codes[d] for d in diag),
                    procedure=frozenset(proc_codes[p] for p in proc),
                    medication=frozenset(medication_code(m) for m in meds),
                )
            )
            planted[vid] = frozenset(medication_code(m) for m in hinted)
            if rng.random() >= config.note_missing_rate:
                text = _synthetic_note(rng, config, sorted(hinted), meds)
                parts = [text]
                if rng.random() < config.split_note_rate:
                    cut = text.index("Hospital Course:")
                    parts = [text[:cut], text[cut:]]
                notes.extend({"visit_id": vid, "category": "Discharge summary", "text": part}
                             for part in parts)
                if rng.random() < 0.2:
                    notes.append({"visit_id": vid, "category": "Nursing", "text": "Pt resting."})
            t = t + timedelta(days=int(rng.integers(20, 400)), hours=int(rng.integers(0, 24)))
        patients.append(PatientRecord(pid, tuple(visits)))

    med_codes = [medication_code(m) for m in range(config.n_medication)]
    ddi = [
        (med_codes[i], med_codes[j])
        for i in range(config.n_medication)
        for j in range(i + 1, config.n_medication)
        if rng.random() < config.ddi_density
    ]
    return SyntheticCorpus(make_dataset(patients), notes, ddi, planted)


def _sentence(rng, lo=4, hi=9) -> str:
    words = list(rng.choice(_FILLER, size=int(rng.integers(lo, hi + 1))))
    return " ".join(words).capitalize() + "."


def _synthetic_note(rng, config: SyntheticConfig, hinted: list[int], meds: list[int]) -> str:
    lo, hi = config.filler_sentences
    filler = lambda: " ".join(_sentence(rng) for _ in range(int(rng.integers(lo, hi + 1))))
    lines = [
        "Chief Complaint: " + _sentence(rng, 2, 4),
        "History of Present Illness: " + filler(),
    ]
    course = filler()
    if hinted:
        course += " Started " + " and ".join(medication_code(m) for m in hinted) + " during stay."
    lines.append("Hospital Course: " + course)
    lines.append("Discharge Medications: " + ", ".join(medication_code(m) for m in meds) + ".")
    lines.append("Discharge Instructions: " + _sentence(rng))
    return "\n".join(lines)
