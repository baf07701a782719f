"""Causal top-K Jaccard visit graphs, the weighted one-layer GCN and the DDI matrix."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F

from .emr_data import CodeVocabulary, Dataset, DatasetSplit, encode_multi_hot, split_edges


@dataclass(frozen=True)
class GraphConfig:
    k_neighbors: int = 10
    include_self_loop: bool = True

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    return len(a & b) / union if union else 0.0


@dataclass(frozen=True)
class VisitGraph:
    """Directed edges ``src -> dst`` meaning visit ``src`` feeds node ``dst``."""

    code_type: str
    visit_ids: tuple[str, ...]
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.visit_ids)

    def edges(self) -> list[tuple[int, int, float]]:
        return list(zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist()))

    def in_edges(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.dst == node
        return self.src[mask], self.weight[mask]

    def restrict(self, keep: np.ndarray) -> "VisitGraph":
        return VisitGraph(self.code_type, self.visit_ids, self.src[keep], self.dst[keep], self.weight[keep])

    def for_phase(self, split: DatasetSplit, patient_of_visit: Mapping[str, str]) -> dict[str, "VisitGraph"]:
        """Per-phase graphs under the split's edge-placement rules."""
        membership = split.membership()
        node_split = {i: membership[patient_of_visit[v]] for i, v in enumerate(self.visit_ids)}
        placed = split_edges(
            [(s, d, i) for i, (s, d) in enumerate(zip(self.src.tolist(), self.dst.tolist()))], node_split
        )
        out = {}
        for phase, edges in placed.items():
            keep = np.zeros(len(self.src), dtype=bool)
            keep[[e[2] for e in edges]] = True
            out[phase] = self.restrict(keep)
        return out

    def neighbor_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded (N, max_deg) neighbor indices and softmax attention weights.

        Padding slots point at the node itself with weight 0. Nodes without
        any in-edge get an all-zero row.
        """
        N = self.n_nodes
        deg = np.bincount(self.dst, minlength=N)
        width = max(int(deg.max()) if len(deg) else 0, 1)
        idx = np.tile(np.arange(N)[:, None], (1, width))
        alpha = np.zeros((N, width))
        order = np.lexsort((self.src, self.dst))
        src, dst, w = self.src[order], self.dst[order], self.weight[order]
        starts = np.concatenate([[0], np.cumsum(deg)])
        for j in np.flatnonzero(deg):
            s, e = starts[j], starts[j + 1]
            idx[j, : e - s] = src[s:e]
            alpha[j, : e - s] = softmax(w[s:e])
        return idx, alpha

    def to_json(self) -> list[dict]:
        out = []
        for j, vid in enumerate(self.visit_ids):
            srcs, ws = self.in_edges(j)
            out.append({"node": vid, "edges": [{"src": self.visit_ids[s], "w": float(x)}
                                               for s, x in zip(srcs.tolist(), ws.tolist())]})
        return out

    @classmethod
    def from_json(cls, code_type: str, nodes: list[dict]) -> "VisitGraph":
        ids = tuple(n["node"] for n in nodes)
        pos = {v: i for i, v in enumerate(ids)}
        src, dst, w = [], [], []
        for j, n in enumerate(nodes):
            for e in n["edges"]:
                src.append(pos[e["src"]])
                dst.append(j)
                w.append(e["w"])
        return cls(code_type, ids, np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64),
                   np.asarray(w, dtype=np.float64))


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max())
    return z / z.sum()


def attention_weights(graph: VisitGraph, node: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbors of ``node`` and their softmax-of-Jaccard attention weights."""
    srcs, ws = graph.in_edges(node)
    if len(srcs) == 0:
        raise ValueError(f"node {node} has no neighbors")
    return srcs, softmax(ws)


def _multi_hot_matrix(code_sets: Sequence[Iterable[str]]) -> sp.csr_matrix:
    vocab = {c: i for i, c in enumerate(sorted({c for s in code_sets for c in s}))}
    rows, cols = [], []
    for r, s in enumerate(code_sets):
        for c in s:
            rows.append(r)
            cols.append(vocab[c])
    data = np.ones(len(rows))
    return sp.csr_matrix((data, (rows, cols)), shape=(len(code_sets), max(len(vocab), 1)))


def build_visit_graph(
    visit_ids: Sequence[str],
    admission_times: Sequence,
    code_sets: Sequence[Iterable[str]],
    cfg: GraphConfig = GraphConfig(),
    code_type: str = "diagnosis",
    block: int = 512,
) -> VisitGraph:
    """Top-K Jaccard in-edges from visits admitted no later than each node.

    Candidate ties are broken by later admission first, then visit id.
    """
    N = len(visit_ids)
    times = np.asarray([np.datetime64(t, "us").astype(np.int64) if not isinstance(t, (int, np.integer))
                        else int(t) for t in admission_times], dtype=np.int64)
    id_rank = np.empty(N, dtype=np.int64)
    id_rank[np.argsort(np.asarray(visit_ids, dtype=object), kind="stable")] = np.arange(N)
    X = _multi_hot_matrix(code_sets)
    sizes = np.asarray(X.sum(axis=1)).ravel()
    src, dst, w = [], [], []
    K = cfg.k_neighbors
    for b0 in range(0, N, block):
        b1 = min(b0 + block, N)
        inter = (X[b0:b1] @ X.T).toarray()
        union = sizes[b0:b1, None] + sizes[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            jac = np.where(union > 0, inter / union, 0.0)
        for j in range(b0, b1):
            row = jac[j - b0]
            cand = np.flatnonzero(times <= times[j])
            cand = cand[cand != j]
            if len(cand) > K:
                vals = row[cand]
                kth = np.partition(vals, len(vals) - K)[len(vals) - K]
                sure = cand[vals > kth]
                tied = cand[vals == kth]
                tied = tied[np.lexsort((id_rank[tied], -times[tied]))][: K - len(sure)]
                cand = np.concatenate([sure, tied])
            order = np.lexsort((id_rank[cand], -times[cand], -row[cand]))
            for t in cand[order]:
                src.append(t)
                dst.append(j)
                w.append(row[t])
            if cfg.include_self_loop:
                src.append(j)
                dst.append(j)
                w.append(1.0)
    return VisitGraph(code_type, tuple(visit_ids), np.asarray(src, dtype=np.int64),
                      np.asarray(dst, dtype=np.int64), np.asarray(w, dtype=np.float64))


def build_dataset_graphs(dataset: Dataset, cfg: GraphConfig = GraphConfig(),
                         code_types: Sequence[str] = ("diagnosis", "procedure", "medication")) -> dict[str, VisitGraph]:
    visits = [v for _, v in dataset.visits()]
    ids = [v.visit_id for v in visits]
    times = [v.admission_time for v in visits]
    return {ct: build_visit_graph(ids, times, [v.codes(ct) for v in visits], cfg, ct) for ct in code_types}


def gcn_forward(
    E: torch.Tensor,
    nbr_idx: torch.Tensor,
    alpha: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    activation: Callable[[torch.Tensor], torch.Tensor] = torch.relu,
    dropout: float = 0.0,
    training: bool = False,
) -> torch.Tensor:
    """h = act(sum_j alpha_j e_j W + b) for each query row of ``nbr_idx``.

    ``E`` holds node embeddings, ``nbr_idx``/``alpha`` are (..., K) neighbor
    indices into ``E`` and attention weights. Dropout acts on the output.
    """
    if E.shape[-1] != weight.shape[0]:
        raise ValueError(f"embedding dim {E.shape[-1]} does not match weight {tuple(weight.shape)}")
    if nbr_idx.shape != alpha.shape:
        raise ValueError("neighbor index and attention shapes differ")
    agg = (alpha.unsqueeze(-1).to(E.dtype) * E[nbr_idx]).sum(dim=-2)
    h = agg @ weight
    if bias is not None:
        h = h + bias
    h = activation(h)
    return F.dropout(h, p=dropout, training=training)


def build_ddi_matrix(pairs: Iterable[tuple[str, str]], med_vocab: CodeVocabulary) -> np.ndarray:
    M = np.zeros((med_vocab.size, med_vocab.size), dtype=np.int8)
    for a, b in pairs:
        i, j = med_vocab.index(a), med_vocab.index(b)
        if i != j:
            M[i, j] = M[j, i] = 1
    return M


def save_graph(graph: VisitGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph.to_json(), fh)


def load_graph(path, code_type: str) -> VisitGraph:
    with open(path, encoding="utf-8") as fh:
        return VisitGraph.from_json(code_type, json.load(fh))
