"""Graph visit encoder with fused note representations.

Pipeline per patient: code embeddings -> weighted visit-graph GCN per code
type -> FFN over (diagnosis + procedure) -> causal Transformer encoder;
note representations get their own causal encoder and a bias-free linear
projection to the code width; the two streams are summed and decoded
against the right-shifted medication history; a sigmoid gives per-drug
probabilities.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F

from .emr_data import CodeVocabulary, Dataset, PatientRecord, encode_multi_hot
from .visit_graph import VisitGraph, gcn_forward

MODES = ("codes_only", "text_only", "combined")
MODE_ALIASES = {"C": "codes_only", "T": "text_only", "C+T": "combined"}
MODE_LABELS = {v: k for k, v in MODE_ALIASES.items()}


def resolve_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of C, T, C+T")
    return mode


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    text_dim: int = 4096
    encoder_layers: int = 1
    decoder_layers: int = 1
    attention_heads: int = 4
    ff_dim: int = 256
    mode: str = "combined"
    gcn_dropout: float = 0.5
    dropout: float = 0.1
    med_history_via_gcn: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", resolve_mode(self.mode))
        if self.embed_dim <= 0 or self.text_dim <= 0:
            raise ValueError("dimensions must be positive")
        for width in (self.embed_dim, self.text_dim):
            if width % self.attention_heads:
                raise ValueError(f"{self.attention_heads} heads do not divide width {width}")

    @property
    def uses_codes(self) -> bool:
        return self.mode != "text_only"

    @property
    def uses_text(self) -> bool:
        return self.mode != "codes_only"

    def to_json(self) -> dict:
        return asdict(self)


def sinusoidal_positions(T: int, dim: int) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(T, dim)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe


def causal_mask(T: int) -> torch.Tensor:
    return torch.triu(torch.full((T, T), float("-inf")), diagonal=1)


# ---------------------------------------------------------------------------
# Inputs


@dataclass
class CorpusTensors:
    """Node-indexed inputs for every visit in the corpus (graph nodes span all visits)."""

    visit_ids: tuple[str, ...]
    node_of: dict[str, int]
    multi_hot: dict[str, sp.csr_matrix]
    vocabs: dict[str, CodeVocabulary]
    text: np.ndarray | None = None

    @classmethod
    def build(cls, dataset: Dataset, vocabs: Mapping[str, CodeVocabulary], text: np.ndarray | None = None):
        visits = [v for _, v in dataset.visits()]
        hots = {}
        for ct, vocab in vocabs.items():
            rows = [encode_multi_hot(v.codes(ct), vocab) for v in visits]
            hots[ct] = sp.csr_matrix(np.stack(rows) if rows else np.zeros((0, vocab.size), np.float32))
        ids = tuple(v.visit_id for v in visits)
        return cls(ids, {v: i for i, v in enumerate(ids)}, hots, dict(vocabs), text)


@dataclass
class GraphInputs:
    """Neighbor tables (node -> padded neighbors + attention) for one phase."""

    idx: dict[str, torch.Tensor]
    alpha: dict[str, torch.Tensor]

    @classmethod
    def from_graphs(cls, graphs: Mapping[str, VisitGraph]) -> "GraphInputs":
        idx, alpha = {}, {}
        for ct, g in graphs.items():
            i, a = g.neighbor_table()
            idx[ct] = torch.from_numpy(i)
            alpha[ct] = torch.from_numpy(a).float()
        return cls(idx, alpha)


@dataclass
class VisitSequenceBatch:
    node_ids: torch.Tensor      # (B, T) long, padded with 0
    mask: torch.Tensor          # (B, T) bool, True on real visits
    medications: torch.Tensor   # (B, T, |C_m|) multi-hot targets / history
    text: torch.Tensor | None   # (B, T, H)

    @property
    def lengths(self) -> list[int]:
        return self.mask.sum(1).tolist()


def make_batch(patients: Sequence[PatientRecord], corpus: CorpusTensors) -> VisitSequenceBatch:
    B = len(patients)
    T = max(len(p.visits) for p in patients)
    node_ids = torch.zeros(B, T, dtype=torch.long)
    mask = torch.zeros(B, T, dtype=torch.bool)
    for b, p in enumerate(patients):
        for t, v in enumerate(p.visits):
            node_ids[b, t] = corpus.node_of[v.visit_id]
            mask[b, t] = True
    flat = node_ids.reshape(-1).numpy()
    meds = torch.from_numpy(corpus.multi_hot["medication"][flat].toarray()).float().reshape(B, T, -1)
    meds = meds * mask.unsqueeze(-1)
    text = None
    if corpus.text is not None:
        text = torch.from_numpy(corpus.text[flat]).float().reshape(B, T, -1) * mask.unsqueeze(-1)
    return VisitSequenceBatch(node_ids, mask, meds, text)


# ---------------------------------------------------------------------------
# Building blocks


def embed_codes(W: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Sum of embedding rows at the active entries of a multi-hot ``c``."""
    if c.shape[-1] != W.shape[0]:
        raise ValueError(f"multi-hot length {c.shape[-1]} does not match table rows {W.shape[0]}")
    return c.to(W.dtype) @ W


def aggregate_diag_proc(h_d: torch.Tensor, h_p: torch.Tensor, f) -> torch.Tensor:
    if h_d.shape != h_p.shape:
        raise ValueError("diagnosis and procedure representations differ in shape")
    return f(h_d + h_p)


def project_text(R_enc: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
    if R_enc.shape[-1] != proj.in_features:
        raise ValueError(f"text width {R_enc.shape[-1]} does not match projection {proj.in_features}")
    return proj(R_enc)


def combine(V_enc: torch.Tensor | None, R_proj: torch.Tensor | None, mode: str) -> torch.Tensor:
    mode = resolve_mode(mode)
    if mode == "codes_only":
        return V_enc
    if mode == "text_only":
        if R_proj is None:
            raise ValueError("text_only mode needs text representations")
        return R_proj
    if R_proj is None:
        raise ValueError("combined mode needs text representations; use zero vectors for visits without notes")
    if V_enc.shape != R_proj.shape:
        raise ValueError("code and text streams differ in shape")
    return V_enc + R_proj


def predict_probabilities(O: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(O)


def select_medications(probs, threshold: float = 0.5) -> list[frozenset]:
    """Index sets {i : p_i >= threshold} per row of a (n, |C_m|) probability array."""
    probs = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    probs = np.atleast_2d(probs)
    return [frozenset(np.flatnonzero(row >= threshold).tolist()) for row in probs]


class _FFN(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.linear = nn.Linear(d, d)

    def forward(self, x):
        return torch.relu(self.linear(x))


def _encoder(width, cfg: ModelConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(width, cfg.attention_heads, cfg.ff_dim, cfg.dropout, batch_first=True)
    return nn.TransformerEncoder(layer, cfg.encoder_layers, enable_nested_tensor=False)


@dataclass
class PredictionOutput:
    logits: torch.Tensor
    probabilities: torch.Tensor
    mask: torch.Tensor


class MedRecModel(nn.Module):
    def __init__(self, config: ModelConfig, n_diagnosis: int, n_procedure: int, n_medication: int):
        super().__init__()
        self.config = config
        self.sizes = {"diagnosis": n_diagnosis, "procedure": n_procedure, "medication": n_medication}
        d = config.embed_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            bound = 1.0 / math.sqrt(d)
            self.embed = nn.ParameterDict({
                ct: nn.Parameter(torch.empty(n, d).uniform_(-bound, bound))
                for ct, n in self.sizes.items()
                if ct == "medication" or config.uses_codes
            })
            gcn_types = (["diagnosis", "procedure"] if config.uses_codes else []) + \
                (["medication"] if config.med_history_via_gcn and config.uses_codes else [])
            self.gcn = nn.ModuleDict({ct: nn.Linear(d, d) for ct in gcn_types})
            if config.uses_codes:
                self.ffn = _FFN(d)
                self.code_encoder = _encoder(d, config)
            if config.uses_text:
                self.text_encoder = _encoder(config.text_dim, config)
                self.text_proj = nn.Linear(config.text_dim, d, bias=False)
            self.start = nn.Parameter(torch.empty(d).uniform_(-bound, bound))
            layer = nn.TransformerDecoderLayer(d, config.attention_heads, config.ff_dim, config.dropout,
                                               batch_first=True)
            self.decoder = nn.TransformerDecoder(layer, config.decoder_layers)
            self.head = nn.Linear(d, n_medication)

    # -- graph stage -------------------------------------------------------
    def graph_representation(self, code_type: str, node_ids: torch.Tensor, corpus: CorpusTensors,
                             graphs: GraphInputs) -> torch.Tensor:
        shape = node_ids.shape
        nodes = node_ids.reshape(-1)
        nbr = graphs.idx[code_type][nodes]
        alpha = graphs.alpha[code_type][nodes]
        needed, local = torch.unique(nbr, return_inverse=True)
        X = torch.from_numpy(corpus.multi_hot[code_type][needed.numpy()].toarray())
        E = embed_codes(self.embed[code_type], X)
        lin = self.gcn[code_type]
        h = gcn_forward(E, local, alpha, lin.weight.T, lin.bias, torch.relu,
                        self.config.gcn_dropout, self.training)
        return h.reshape(*shape, -1)

    # -- sequence stages ---------------------------------------------------
    def encode_sequences(self, V: torch.Tensor | None, R: torch.Tensor | None):
        """Causal encoders for the code stream and the text stream."""
        V_enc = R_enc = None
        if V is not None:
            T = V.shape[1]
            V_enc = self.code_encoder(V + sinusoidal_positions(T, V.shape[-1]), mask=causal_mask(T))
        if R is not None:
            T = R.shape[1]
            R_enc = self.text_encoder(R + sinusoidal_positions(T, R.shape[-1]), mask=causal_mask(T))
        return V_enc, R_enc

    def medication_history(self, meds: torch.Tensor, node_ids: torch.Tensor, corpus=None, graphs=None):
        """Right-shifted medication inputs with a learned start vector at position 0."""
        B, T = meds.shape[:2]
        start = self.start.expand(B, 1, -1)
        if not self.config.uses_codes:
            return start.expand(B, T, -1)
        if self.config.med_history_via_gcn:
            hist = self.graph_representation("medication", node_ids, corpus, graphs)
        else:
            hist = embed_codes(self.embed["medication"], meds)
        return torch.cat([start, hist[:, :-1]], dim=1)

    def decode(self, L: torch.Tensor, history: torch.Tensor) -> torch.Tensor:
        if L.shape[:2] != history.shape[:2]:
            raise ValueError("visit sequence and medication history lengths differ")
        T = L.shape[1]
        tgt = history + sinusoidal_positions(T, history.shape[-1])
        mask = causal_mask(T)
        out = self.decoder(tgt, L, tgt_mask=mask, memory_mask=mask)
        return self.head(out)

    def forward(self, batch: VisitSequenceBatch, corpus: CorpusTensors, graphs: GraphInputs) -> PredictionOutput:
        cfg = self.config
        V = R = None
        if cfg.uses_codes:
            h_d = self.graph_representation("diagnosis", batch.node_ids, corpus, graphs)
            h_p = self.graph_representation("procedure", batch.node_ids, corpus, graphs)
            V = aggregate_diag_proc(h_d, h_p, self.ffn)
        if cfg.uses_text:
            if batch.text is None:
                raise ValueError(f"mode {MODE_LABELS[cfg.mode]} needs text representations; run extract first")
            R = batch.text
        V_enc, R_enc = self.encode_sequences(V, R)
        R_proj = project_text(R_enc, self.text_proj) if R_enc is not None else None
        L = combine(V_enc, R_proj, cfg.mode)
        history = self.medication_history(batch.medications, batch.node_ids, corpus, graphs)
        O = self.decode(L, history)
        return PredictionOutput(O, predict_probabilities(O), batch.mask)
