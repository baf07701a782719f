"""
From a discharge note to a visit vector
=======================================

Section a note, drop the medication list we are trying to predict, chunk the
rest under a tiny token budget and average deterministic stub hidden states.
"""
import numpy as np

from notecode.notes import ChunkingConfig, chunk_note, clean_note_records, reassemble
from notecode.text_repr import ExtractionConfig, MissingNoteError, stub_provider, visit_representation

raw = """Chief Complaint: shortness of breath.
History of Present Illness: 67 yo with CHF. Worse over 3 days. Dr. Lee saw pt. in clinic.
Discharge Medications: furosemide 40 mg, lisinopril 10 mg
Brief Hospital Course: Diuresed well. Weight down 2 kg. Stable on room air."""

note = clean_note_records([raw])
print(note, end="\n\n")
assert "furosemide" not in note

chunks = chunk_note(note, ChunkingConfig(budget=8))
for c in chunks:
    print(f"[{c.index}] {c.token_count:>2} tok{' (oversized)' if c.oversized else ''}: {c.text!r}")
assert reassemble(note, chunks) == note

# the stub is position independent, so chunking never changes the mean
provider = stub_provider(seed=3, H=16)
small = visit_representation(provider, note, ExtractionConfig(chunking=ChunkingConfig(budget=8)))
large = visit_representation(provider, note, ExtractionConfig())
print("identical under any budget:", np.array_equal(small, large))

# a visit without a note is an error here; corpus extraction stores zeros instead
try:
    visit_representation(provider, None, ExtractionConfig())
except MissingNoteError as exc:
    print("no note:", exc)
