"""Discharge-summary sectioning, normalization and sentence-complete chunking."""
from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

from .emr_data import Dataset, PatientRecord

# canonical section name -> accepted header spellings
SECTION_HEADERS: dict[str, tuple[str, ...]] = {
    # admission-note sections
    "chief_complaint": ("chief complaint",),
    "present_illness": ("history of present illness", "present illness", "hpi"),
    "medical_history": ("past medical history", "medical history", "pmh"),
    "medications_on_admission": ("medications on admission", "admission medications"),
    "allergies": ("allergies",),
    "physical_exam": ("physical exam", "physical examination"),
    "family_history": ("family history",),
    "social_history": ("social history",),
    # discharge sections
    "procedure": ("major surgical or invasive procedure", "procedures", "procedure"),
    "discharge_medications": ("discharge medications", "discharge medication"),
    "discharge_diagnosis": ("discharge diagnoses", "discharge diagnosis"),
    "discharge_condition": ("discharge condition",),
    "pertinent_results": ("pertinent results",),
    "hospital_course": ("brief hospital course", "hospital course"),
    "discharge_instructions": ("discharge instructions",),
}
ADMISSION_SECTIONS = frozenset(list(SECTION_HEADERS)[:8])
DISCHARGE_SECTIONS = frozenset(list(SECTION_HEADERS)[8:])
ANONYMOUS = "anonymous"
# the prediction target; never fed to the model
DROPPED_SECTIONS = frozenset({"discharge_medications"})

_ALIAS = {alias: name for name, aliases in SECTION_HEADERS.items() for alias in aliases}
_HEADER_RE = re.compile(
    r"^[ \t]*(?P<header>" + "|".join(
        re.escape(a).replace(r"\ ", r"[ \t]+") for a in sorted(_ALIAS, key=len, reverse=True)
    ) + r")[ \t]*:",
    re.IGNORECASE | re.MULTILINE,
)

ABBREVIATIONS = frozenset(
    "dr. mr. mrs. ms. mg. mcg. ml. kg. approx. vs. pt. pts. no. st. e.g. i.e. etc. "
    "b.i.d. t.i.d. q.i.d. p.o. q.d. h.s. p.r.n. prn. inc. fig.".split()
)
_SENTENCE_END_RE = re.compile(r"[.?!][ \t]+(?=[A-Z0-9])")


@dataclass(frozen=True)
class NoteSection:
    name: str
    text: str
    header: str | None = None

    def render(self) -> str:
        return f"{self.header}: {self.text}" if self.header else self.text


def _canonical(header: str) -> str:
    return _ALIAS[re.sub(r"[ \t]+", " ", header.lower())]


def section_note(text: str, drop: Iterable[str] = DROPPED_SECTIONS) -> list[NoteSection]:
    """Split a note on known ``Header:`` lines (case-insensitive).

    Text before the first header becomes an anonymous section; sections
    named in ``drop`` are removed.
    """
    drop = frozenset(drop)
    matches = list(_HEADER_RE.finditer(text))
    sections = []
    if not matches:
        return [NoteSection(ANONYMOUS, text)]
    lead = text[: matches[0].start()].strip()
    if lead:
        sections.append(NoteSection(ANONYMOUS, lead))
    for m, nxt in zip(matches, matches[1:] + [None]):
        body = text[m.end(): nxt.start() if nxt else len(text)].strip()
        header = re.sub(r"\s+", " ", m.group("header").strip())
        sections.append(NoteSection(_canonical(header), body, header))
    return [s for s in sections if s.name not in drop]


def normalize_and_concat(records: Sequence[str]) -> str:
    """Join one visit's note records with newlines and squeeze blanks."""
    lines = []
    for record in records:
        for line in record.replace("\r\n", "\n").replace("\r", "\n").split("\n"):
            line = re.sub(r"[ \t\f\v]+", " ", line).strip()
            if line:
                lines.append(line)
    return "\n".join(lines)


def clean_note_records(
    records: Sequence[str],
    drop: Iterable[str] = DROPPED_SECTIONS,
    keep: Iterable[str] | None = None,
) -> str:
    """Section each record, drop/keep sections, then normalize and concatenate."""
    keep = None if keep is None else frozenset(keep) | {ANONYMOUS}
    rendered = []
    for record in records:
        sections = section_note(record, drop)
        if keep is not None:
            sections = [s for s in sections if s.name in keep]
        rendered.append("\n".join(s.render() for s in sections if s.text or s.header))
    return normalize_and_concat(rendered)


# ---------------------------------------------------------------------------
# Chunking


@dataclass(frozen=True)
class ChunkingConfig:
    budget: int = 2048
    tokenizer: Callable[[str], Sequence] = str.split
    section_mode: str = "length_based"
    context_window: int | None = None

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("chunk budget must be positive")
        if self.context_window is not None and self.budget >= self.context_window:
            raise ValueError("chunk budget must be smaller than the context window")
        if self.section_mode not in ("section_based", "length_based"):
            raise ValueError(f"unknown section_mode {self.section_mode!r}")


@dataclass(frozen=True)
class Chunk:
    text: str
    token_count: int
    index: int
    start: int
    end: int
    oversized: bool = False


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """(start, end) offsets of sentences; separators are the whitespace between."""
    cuts = []
    for m in _SENTENCE_END_RE.finditer(text):
        word_start = text.rfind(" ", 0, m.start()) + 1
        word_start = max(word_start, text.rfind("\n", 0, m.start()) + 1)
        if text[word_start: m.start() + 1].lower() in ABBREVIATIONS:
            continue
        cuts.append((m.start() + 1, m.end()))
    for m in re.finditer(r"\n", text):
        cuts.append((m.start(), m.end()))
    cuts.sort()
    spans, pos = [], 0
    for sep_start, sep_end in cuts:
        if sep_start > pos:
            spans.append((pos, sep_start))
        pos = max(pos, sep_end)
    if pos < len(text):
        spans.append((pos, len(text)))
    return spans


def chunk_note(text: str, cfg: ChunkingConfig = ChunkingConfig()) -> list[Chunk]:
    """Greedy sentence packing under a token budget.

    A sentence alone over budget becomes its own chunk flagged ``oversized``.
    In section_based mode a section header always opens a new chunk.
    """
    spans = sentence_spans(text)
    counts = [len(cfg.tokenizer(text[s:e])) for s, e in spans]
    chunks: list[Chunk] = []
    cur: list[int] = []

    def flush():
        if not cur:
            return
        s, e = spans[cur[0]][0], spans[cur[-1]][1]
        n = len(cfg.tokenizer(text[s:e]))
        chunks.append(Chunk(text[s:e], n, len(chunks), s, e, oversized=n > cfg.budget))
        cur.clear()

    for i, (s, _) in enumerate(spans):
        starts_section = cfg.section_mode == "section_based" and _HEADER_RE.match(text, s) is not None
        if cur and (starts_section or sum(counts[j] for j in cur) + counts[i] > cfg.budget):
            flush()
        cur.append(i)
    flush()
    return chunks


def reassemble(text: str, chunks: Sequence[Chunk]) -> str:
    """Rebuild the note from chunk texts plus the original separators."""
    out, pos = [], 0
    for c in chunks:
        out.append(text[pos:c.start])
        out.append(c.text)
        pos = c.end
    out.append(text[pos:])
    return "".join(out)


# ---------------------------------------------------------------------------
# Notes <-> visits


def load_notes(path, categories: Iterable[str] | None = ("Discharge summary",)) -> dict[str, list[str]]:
    """Read notes.jsonl into visit_id -> records (file order), filtered by category."""
    cats = None if categories is None else {c.lower() for c in categories}
    out: dict[str, list[str]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if cats is not None and str(obj.get("category", "")).lower() not in cats:
                continue
            out[str(obj["visit_id"])].append(obj["text"])
    return dict(out)


@dataclass
class AttachReport:
    attached: int = 0
    missing: int = 0
    orphans: list[str] = field(default_factory=list)


def attach_notes(
    dataset: Dataset,
    notes_by_visit: Mapping[str, str | Sequence[str]],
    clean: Callable[[Sequence[str]], str] = normalize_and_concat,
) -> tuple[Dataset, AttachReport]:
    """Attach notes to structured visits; orphan notes are dropped and reported."""
    report = AttachReport()
    known = set()
    patients = []
    for p in dataset.patients:
        visits = []
        for v in p.visits:
            known.add(v.visit_id)
            records = notes_by_visit.get(v.visit_id)
            if records is None:
                report.missing += 1
                visits.append(replace(v, note=None))
                continue
            if isinstance(records, str):
                records = [records]
            text = clean(records)
            visits.append(replace(v, note=text or None))
            if text:
                report.attached += 1
            else:
                report.missing += 1
        patients.append(PatientRecord(p.patient_id, tuple(visits)))
    report.orphans = sorted(set(notes_by_visit) - known)
    return Dataset(tuple(patients)), report
