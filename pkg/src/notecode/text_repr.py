"""Per-visit text representations from intermediate LLM hidden states.

A visit's representation is the mean over every note token of the chosen
layer's hidden state. Notes are fed chunk by chunk; per-chunk state matrices
are stacked back to full note length before averaging. Visits without a
note get the all-zero vector.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .emr_data import Dataset
from .notes import Chunk, ChunkingConfig, chunk_note

log = logging.getLogger(__name__)

DEFAULT_LAYER = 16


class ContextOverflowError(ValueError):
    pass


class MissingNoteError(ValueError):
    """Raised when there is nothing to average; callers emit the zero vector."""


@runtime_checkable
class HiddenStateProvider(Protocol):
    context_window: int
    hidden_dim: int
    layer_count: int

    def tokenize(self, text: str) -> list: ...

    def hidden_states(self, tokens: Sequence, layer: int) -> np.ndarray: ...

    def identity(self) -> dict: ...


_MED_RE = re.compile(r"^MED(\d+)(?![0-9A-Za-z])")


def _token_seed(token: str, layer: int, seed: int) -> int:
    digest = hashlib.blake2b(f"{seed}\x1f{layer}\x1f{token}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class StubProvider:
    """Deterministic stand-in for an LLM.

    Tokens are whitespace-separated words. Ordinary tokens get a Gaussian
    vector seeded by a hash of (seed, layer, token) spread over the
    non-reserved coordinates. A token ``MEDk`` (trailing punctuation
    allowed) maps to ``signal_scale`` times unit direction k, for
    k < ``reserved``. Hidden states do not depend on token position, so
    chunked and whole-note extraction agree exactly.
    """

    name = "stub"

    def __init__(self, seed: int = 0, hidden_dim: int = 64, context_window: int = 4096,
                 layer_count: int = 32, reserved: int | None = None, signal_scale: float = 8.0):
        self.seed = seed
        self.hidden_dim = hidden_dim
        self.context_window = context_window
        self.layer_count = layer_count
        self.reserved = hidden_dim // 2 if reserved is None else reserved
        if not 0 <= self.reserved < hidden_dim:
            raise ValueError("reserved directions must leave at least one free coordinate")
        self.signal_scale = signal_scale
        self._vector = lru_cache(maxsize=200_000)(self._vector_uncached)

    def identity(self) -> dict:
        return {"backend": self.name, "seed": self.seed, "hidden_dim": self.hidden_dim,
                "reserved": self.reserved, "signal_scale": self.signal_scale}

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def _vector_uncached(self, token: str, layer: int) -> np.ndarray:
        vec = np.zeros(self.hidden_dim, dtype=np.float64)
        m = _MED_RE.match(token)
        if m and int(m.group(1)) < self.reserved:
            vec[int(m.group(1))] = self.signal_scale
        else:
            rng = np.random.default_rng(_token_seed(token, layer, self.seed))
            vec[self.reserved:] = rng.standard_normal(self.hidden_dim - self.reserved)
        vec.setflags(write=False)
        return vec

    def hidden_states(self, tokens: Sequence[str], layer: int) -> np.ndarray:
        if not 0 <= layer < self.layer_count:
            raise ValueError(f"layer {layer} out of range for {self.layer_count} layers")
        if len(tokens) == 0:
            return np.zeros((0, self.hidden_dim))
        return np.stack([self._vector(t, layer) for t in tokens])


def stub_provider(seed: int = 0, H: int = 64, D: int = 4096, **kw) -> StubProvider:
    return StubProvider(seed=seed, hidden_dim=H, context_window=D, **kw)


class TransformersProvider:
    """Adapter over a Hugging Face causal LM (e.g. Mistral-7B-Instruct).

    Special tokens are left out of both the input and the average.
    """

    name = "transformers"

    def __init__(self, model, tokenizer, model_name: str = "custom"):
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.model_name = model_name
        cfg = model.config
        self.hidden_dim = cfg.hidden_size
        self.layer_count = cfg.num_hidden_layers + 1
        self.context_window = getattr(cfg, "max_position_embeddings", 4096)

    @classmethod
    def from_pretrained(cls, name: str, **kw):
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tok = AutoTokenizer.from_pretrained(name)
        model = AutoModelForCausalLM.from_pretrained(name, **kw)
        return cls(model, tok, model_name=name)

    def identity(self) -> dict:
        return {"backend": self.name, "model": self.model_name, "hidden_dim": self.hidden_dim}

    def tokenize(self, text: str) -> list[int]:
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def hidden_states(self, tokens, layer: int) -> np.ndarray:
        import torch

        if len(tokens) == 0:
            return np.zeros((0, self.hidden_dim))
        with torch.no_grad():
            out = self.model(torch.tensor([list(tokens)]), output_hidden_states=True)
        return out.hidden_states[layer][0].float().cpu().numpy().astype(np.float64)


def get_provider(name: str | None = None, **kw) -> HiddenStateProvider:
    """Resolve a backend by name; defaults to $NOTECODE_BACKEND or ``stub``."""
    name = name or os.environ.get("NOTECODE_BACKEND", "stub")
    if name == "stub":
        return stub_provider(**kw)
    return TransformersProvider.from_pretrained(name)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExtractionConfig:
    layer: int = DEFAULT_LAYER
    chunking: ChunkingConfig = ChunkingConfig()

    def describe(self) -> dict:
        c = self.chunking
        return {"layer": self.layer, "budget": c.budget, "section_mode": c.section_mode}


@dataclass(frozen=True)
class TextRepresentation:
    visit_id: str
    vector: np.ndarray
    has_note: bool


def extract_chunk_states(provider: HiddenStateProvider, chunk: Chunk | str, layer: int) -> np.ndarray:
    text = chunk.text if isinstance(chunk, Chunk) else chunk
    tokens = provider.tokenize(text)
    if len(tokens) > provider.context_window:
        raise ContextOverflowError(
            f"chunk has {len(tokens)} tokens, context window is {provider.context_window}")
    return provider.hidden_states(tokens, layer)


def assemble_visit_representation(chunk_matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Stack chunk states along the token axis and average over all tokens."""
    if len(chunk_matrices) == 0:
        raise MissingNoteError("no chunk states to average")
    stacked = np.concatenate(chunk_matrices, axis=0)
    if stacked.shape[0] == 0:
        raise MissingNoteError("chunks contain no tokens")
    return stacked.mean(axis=0)


def visit_representation(provider: HiddenStateProvider, note: str | None,
                         cfg: ExtractionConfig = ExtractionConfig()) -> np.ndarray:
    """Chunk, extract and average one note. Over-long chunks are re-split by token windows."""
    if not note:
        raise MissingNoteError("visit has no note")
    matrices = []
    for chunk in chunk_note(note, cfg.chunking):
        try:
            matrices.append(extract_chunk_states(provider, chunk, cfg.layer))
        except ContextOverflowError:
            tokens = provider.tokenize(chunk.text)
            D = provider.context_window
            matrices.extend(provider.hidden_states(tokens[i:i + D], cfg.layer)
                            for i in range(0, len(tokens), D))
    return assemble_visit_representation(matrices)


# ---------------------------------------------------------------------------
# Store


def config_hash(provider: HiddenStateProvider, cfg: ExtractionConfig) -> str:
    payload = json.dumps({"provider": provider.identity(), "extraction": cfg.describe()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class RepresentationStore:
    """Directory of little-endian float32 ``.f32`` shards plus ``manifest.json``.

    Manifest entries map visit_id to shard, element offset, length, config
    hash and status. A run writes to a fresh shard, so concurrent writers
    never share a file; only the manifest is merged.
    """

    MANIFEST = "manifest.json"

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        mf = self.path / self.MANIFEST
        self.manifest = json.loads(mf.read_text()) if mf.exists() else {"hidden_dim": None, "entries": {}}

    @property
    def entries(self) -> dict:
        return self.manifest["entries"]

    @property
    def hidden_dim(self) -> int | None:
        return self.manifest["hidden_dim"]

    def _next_shard(self) -> str:
        existing = sorted(self.path.glob("shard-*.f32"))
        return f"shard-{len(existing):05d}.f32"

    def is_current(self, visit_id: str, chash: str) -> bool:
        e = self.entries.get(visit_id)
        return e is not None and e["config_hash"] == chash and e["status"] in ("ok", "empty")

    def write(self, reps: Sequence[TextRepresentation], chash: str, failed: Sequence[str] = ()):
        if reps:
            H = int(reps[0].vector.shape[0])
            if self.hidden_dim not in (None, H):
                raise ValueError(f"store holds dimension {self.hidden_dim}, got {H}")
            self.manifest["hidden_dim"] = H
            shard = self._next_shard()
            block = np.stack([r.vector for r in reps]).astype("<f4", copy=False)
            with open(self.path / shard, "wb") as fh:
                fh.write(np.ascontiguousarray(block).tobytes())
            for i, r in enumerate(reps):
                self.entries[r.visit_id] = {
                    "shard": shard, "offset": i * H, "length": H, "config_hash": chash,
                    "status": "ok" if r.has_note else "empty",
                }
        for vid in failed:
            self.entries[vid] = {"shard": None, "offset": 0, "length": 0,
                                 "config_hash": chash, "status": "failed"}
        self.flush()

    def flush(self):
        tmp = self.path / (self.MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.manifest, sort_keys=True, indent=1))
        tmp.replace(self.path / self.MANIFEST)

    def get(self, visit_id: str) -> np.ndarray:
        e = self.entries[visit_id]
        if e["status"] == "failed":
            raise KeyError(f"extraction failed for visit {visit_id!r}")
        data = np.fromfile(self.path / e["shard"], dtype="<f4", count=e["length"], offset=4 * e["offset"])
        return data.astype(np.float32)

    def matrix(self, visit_ids: Sequence[str]) -> np.ndarray:
        """Rows in ``visit_ids`` order; raises KeyError for absent visits."""
        H = self.hidden_dim or 0
        out = np.zeros((len(visit_ids), H), dtype=np.float32)
        cache: dict[str, np.ndarray] = {}
        for i, vid in enumerate(visit_ids):
            e = self.entries[vid]
            if e["status"] == "failed":
                raise KeyError(f"extraction failed for visit {vid!r}")
            shard = cache.get(e["shard"])
            if shard is None:
                shard = cache[e["shard"]] = np.fromfile(self.path / e["shard"], dtype="<f4")
            out[i] = shard[e["offset"]: e["offset"] + e["length"]]
        return out


@dataclass
class ExtractionReport:
    extracted: int = 0
    skipped: int = 0
    empty: int = 0
    failed: list[str] = field(default_factory=list)


def extract_corpus(dataset: Dataset, provider: HiddenStateProvider, cfg: ExtractionConfig,
                   store_path, workers: int = 1) -> tuple[RepresentationStore, ExtractionReport]:
    """Extract one representation per visit into a store, skipping up-to-date entries."""
    if not 0 <= cfg.layer < provider.layer_count:
        raise ValueError(f"layer {cfg.layer} out of range for {provider.layer_count} layers")
    store = RepresentationStore(store_path)
    chash = config_hash(provider, cfg)
    report = ExtractionReport()
    todo = []
    for _, v in dataset.visits():
        if store.is_current(v.visit_id, chash):
            report.skipped += 1
        else:
            todo.append(v)

    def work(v):
        try:
            if not v.note:
                return v.visit_id, np.zeros(provider.hidden_dim, dtype=np.float32), False, None
            vec = visit_representation(provider, v.note, cfg)
            if not np.all(np.isfinite(vec)):
                raise FloatingPointError("non-finite hidden states")
            return v.visit_id, vec.astype(np.float32), True, None
        except Exception as exc:  # a bad visit must not stop the run
            return v.visit_id, None, False, exc

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(v) for v in todo]

    reps, failed = [], []
    for vid, vec, has_note, exc in results:
        if exc is not None:
            log.warning("extraction failed for %s: %s", vid, exc)
            failed.append(vid)
            continue
        reps.append(TextRepresentation(vid, vec, has_note))
        report.extracted += has_note
        report.empty += not has_note
    report.failed = failed
    if reps or failed:
        store.write(reps, chash, failed)
    return store, report
