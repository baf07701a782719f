"""Losses, the training loop, checkpoint averaging and evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .emr_data import CodeVocabulary, Dataset, DatasetSplit
from .metrics import MetricsReport, compute_report, jaccard_metric
from .model import (CorpusTensors, GraphInputs, MedRecModel, ModelConfig, make_batch,
                    resolve_mode, select_medications)
from .visit_graph import VisitGraph

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Losses. All take probabilities (sigmoid already applied) and sum over
# visits; ``mask`` (..., T) selects real visits.


def _masked(x: torch.Tensor, mask) -> torch.Tensor:
    return x if mask is None else x * mask.unsqueeze(-1).to(x.dtype)


def bce_loss(probs: torch.Tensor, targets: torch.Tensor, mask=None, eps: float = EPS) -> torch.Tensor:
    if probs.shape != targets.shape:
        raise ValueError(f"probabilities {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    p = probs.clamp(eps, 1 - eps)
    y = targets.to(p.dtype)
    return -_masked(y * torch.log(p) + (1 - y) * torch.log(1 - p), mask).sum()


def multilabel_margin_loss(probs: torch.Tensor, targets: torch.Tensor, mask=None) -> torch.Tensor:
    """sum over visits of sum_{i not in Y} sum_{j in Y} max(0, 1 - (p_j - p_i)) / |C_m|."""
    if probs.shape != targets.shape:
        raise ValueError(f"probabilities {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    y = targets.to(probs.dtype)
    C = probs.shape[-1]
    # hinge[..., i, j] for negative i and positive j
    hinge = torch.relu(1 - probs.unsqueeze(-2) + probs.unsqueeze(-1))
    pairs = (1 - y).unsqueeze(-1) * y.unsqueeze(-2)
    per_visit = (hinge * pairs).sum(dim=(-1, -2)) / C
    if mask is not None:
        per_visit = per_visit * mask.to(per_visit.dtype)
    return per_visit.sum()


def combined_loss(probs, targets, alpha: float, mask=None) -> torch.Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * bce_loss(probs, targets, mask) + (1 - alpha) * multilabel_margin_loss(probs, targets, mask)


def loss_gradients(probs, targets, alpha: float, eps: float = EPS) -> np.ndarray:
    """Closed-form gradient of the combined loss with respect to the probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    inside = (p > eps) & (p < 1 - eps)
    g_bce = np.where(inside, -(y / p) + (1 - y) / (1 - p), 0.0)
    C = p.shape[-1]
    active = (1 - p[..., None, :] + p[..., :, None]) > 0
    pairs = (1 - y)[..., :, None] * y[..., None, :] * active
    # d/dp_i of (1 - p_j + p_i) is +1 for the negative i, -1 for the positive j
    g_margin = (pairs.sum(-1) - pairs.sum(-2)) / C
    return alpha * g_bce + (1 - alpha) * g_margin


def gradient_check(loss_fn: Callable, params: Mapping[str, torch.Tensor], inputs=None, h: float = 1e-4,
                   n_samples: int = 20, seed: int = 0, skip: Callable | None = None) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn(params, inputs)`` returns a scalar tensor. Up to ``n_samples``
    entries per parameter are probed; ``skip(name, index)`` may exclude
    entries at non-smooth points.
    """
    rng = np.random.default_rng(seed)
    leaves = {k: v.detach().clone().to(torch.float64).requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves, inputs)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    worst = 0.0
    for (name, leaf), g in zip(leaves.items(), grads):
        g = torch.zeros_like(leaf) if g is None else g
        flat = leaf.detach().reshape(-1)
        picks = rng.choice(flat.numel(), size=min(n_samples, flat.numel()), replace=False)
        for i in picks:
            idx = np.unravel_index(i, leaf.shape)
            if skip is not None and skip(name, idx):
                continue
            vals = {}
            for sign in (1, -1):
                probe = {k: v.detach().clone() for k, v in leaves.items()}
                probe[name].reshape(-1)[i] += sign * h
                with torch.no_grad():
                    vals[sign] = float(loss_fn(probe, inputs))
            numeric = (vals[1] - vals[-1]) / (2 * h)
            analytic = float(g.reshape(-1)[i])
            scale = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst


# ---------------------------------------------------------------------------
# Configuration and data


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.003
    epochs: int = 100
    batch_size: int = 256
    warmup_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate must be >= 0; epochs and batch_size positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")


def cosine_with_warmup(step: int, total: int, warmup: int) -> float:
    if warmup and step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class TrainingData:
    dataset: Dataset
    split: DatasetSplit
    corpus: CorpusTensors
    graphs: dict[str, GraphInputs]
    ddi: np.ndarray | None = None

    @classmethod
    def prepare(cls, dataset: Dataset, vocabs: Mapping[str, CodeVocabulary], split: DatasetSplit,
                graphs: Mapping[str, VisitGraph], text: np.ndarray | None = None,
                ddi: np.ndarray | None = None) -> "TrainingData":
        corpus = CorpusTensors.build(dataset, vocabs, text)
        pov = dataset.patient_of_visit()
        per_phase: dict[str, dict] = {"train": {}, "validation": {}, "test": {}}
        for ct, g in graphs.items():
            if g.visit_ids != corpus.visit_ids:
                raise ValueError(f"{ct} graph nodes do not match the dataset visits")
            for phase, pg in g.for_phase(split, pov).items():
                per_phase[phase][ct] = pg
        return cls(dataset, split, corpus,
                   {phase: GraphInputs.from_graphs(gs) for phase, gs in per_phase.items()}, ddi)

    def patients(self, phase: str, min_visits: int = 1):
        ids = set(getattr(self.split, phase))
        return [p for p in self.dataset.patients if p.patient_id in ids and len(p.visits) >= min_visits]

    def build_model(self, config: ModelConfig) -> MedRecModel:
        v = self.corpus.vocabs
        if config.uses_text:
            if self.corpus.text is None:
                raise ValueError("text modes need extracted representations; run extract first")
            if self.corpus.text.shape[1] != config.text_dim:
                raise ValueError(f"representations have dimension {self.corpus.text.shape[1]}, "
                                 f"model expects {config.text_dim}")
        return MedRecModel(config, v["diagnosis"].size, v["procedure"].size, v["medication"].size)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    epoch: int
    val_jaccard: float


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.epochs)


def snapshot(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32, copy=True) for k, v in model.state_dict().items()}


def load_params(model: torch.nn.Module, params: Mapping[str, np.ndarray]) -> torch.nn.Module:
    model.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in params.items()})
    return model


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def predict(model: MedRecModel, data: TrainingData, phase: str, min_visits: int = 1,
            batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and multi-hot targets for every real visit of a phase, in dataset order."""
    model.eval()
    graphs = data.graphs[phase]
    probs, targets = [], []
    with torch.no_grad():
        for chunk in _batches(data.patients(phase, min_visits), batch_size):
            batch = make_batch(chunk, data.corpus)
            out = model(batch, data.corpus, graphs)
            probs.append(out.probabilities[batch.mask].numpy())
            targets.append(batch.medications[batch.mask].numpy())
    C = data.corpus.vocabs["medication"].size
    if not probs:
        return np.zeros((0, C)), np.zeros((0, C))
    return np.concatenate(probs).astype(np.float64), np.concatenate(targets)


def evaluate(model_or_params, data: TrainingData, phase: str = "test", mode: str | None = None,
             config: ModelConfig | None = None, threshold: float = 0.5, min_visits: int = 1) -> MetricsReport:
    """Single inference pass over a phase's patients."""
    model = model_or_params
    if not isinstance(model, MedRecModel):
        if config is None:
            raise ValueError("config is required when evaluating a parameter map")
        if mode is not None:
            config = ModelConfig(**{**config.to_json(), "mode": resolve_mode(mode)})
        model = load_params(data.build_model(config), model_or_params)
    probs, targets = predict(model, data, phase, min_visits)
    Y = [frozenset(np.flatnonzero(t).tolist()) for t in targets]
    Y_hat = select_medications(probs, threshold) if len(probs) else []
    ddi = data.ddi if data.ddi is not None else np.zeros((targets.shape[1],) * 2)
    return compute_report(Y, Y_hat, probs, targets, ddi)


def phase_jaccard(model, data: TrainingData, phase: str, min_visits: int = 1) -> float:
    probs, targets = predict(model, data, phase, min_visits)
    Y = [frozenset(np.flatnonzero(t).tolist()) for t in targets]
    return jaccard_metric(Y, select_medications(probs) if len(probs) else [])


def train(model_config: ModelConfig, data: TrainingData, opt: OptimizerConfig = OptimizerConfig(),
          loss_cfg: LossConfig = LossConfig(), min_train_visits: int = 2,
          on_epoch: Callable[[dict], None] | None = None):
    """Fit the model; returns ``(checkpoints, report, model)`` with one checkpoint per epoch.

    Only patients with at least ``min_train_visits`` visits are trained on,
    while graph neighbors come from the whole corpus.
    """
    torch.manual_seed(opt.seed)
    rng = np.random.default_rng(opt.seed)
    model = data.build_model(model_config)
    train_patients = data.patients("train", min_train_visits)
    if not train_patients:
        raise ValueError("no training patients with enough visits")
    graphs = data.graphs["train"]
    n_batches = math.ceil(len(train_patients) / opt.batch_size)
    total = n_batches * opt.epochs
    warmup = int(opt.warmup_fraction * total)
    optim = torch.optim.Adam(model.parameters(), lr=opt.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(optim, lambda s: cosine_with_warmup(s, total, warmup))

    checkpoints, report = [], TrainReport()
    for epoch in range(1, opt.epochs + 1):
        model.train()
        order = rng.permutation(len(train_patients))
        epoch_loss, n_visits = 0.0, 0
        for bi, idx in enumerate(_batches(order, opt.batch_size)):
            batch = make_batch([train_patients[i] for i in idx], data.corpus)
            out = model(batch, data.corpus, graphs)
            loss = combined_loss(out.probabilities, batch.medications, loss_cfg.alpha, batch.mask)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {bi}: {loss.item()}")
            optim.zero_grad()
            loss.backward()
            optim.step()
            sched.step()
            epoch_loss += loss.item()
            n_visits += int(batch.mask.sum())
        val_j = phase_jaccard(model, data, "validation")
        record = {"epoch": epoch, "train_loss": epoch_loss / max(n_visits, 1),
                  "val_jaccard": val_j, "lr": optim.param_groups[0]["lr"]}
        report.epochs.append(record)
        checkpoints.append(Checkpoint(snapshot(model), epoch, val_j))
        log.info("epoch %d loss %.4f val_jaccard %.4f", epoch, record["train_loss"], val_j)
        if on_epoch is not None:
            on_epoch(record)
    return checkpoints, report, model


def rank_checkpoints(checkpoints: Sequence[Checkpoint]) -> list[Checkpoint]:
    return sorted(checkpoints, key=lambda c: (-c.val_jaccard, -c.epoch))


def average_top_checkpoints(checkpoints: Sequence[Checkpoint], k: int = 5) -> dict[str, np.ndarray]:
    """Elementwise mean of the ``k`` best checkpoints by validation Jaccard (later epoch wins ties)."""
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    top = rank_checkpoints(checkpoints)[:k]
    if len(top) == 1:
        return {n: a.copy() for n, a in top[0].params.items()}
    out = {}
    for name, ref in top[0].params.items():
        if not np.issubdtype(ref.dtype, np.floating):
            out[name] = ref.copy()
            continue
        stacked = np.stack([c.params[name].astype(np.float64) for c in top])
        out[name] = stacked.mean(axis=0).astype(ref.dtype)
    return out


# ---------------------------------------------------------------------------
# Checkpoint files: safetensors body (name -> float32 array) with a JSON header


def save_checkpoint(path, params: Mapping[str, np.ndarray], header: dict) -> None:
    from safetensors.numpy import save_file

    tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in params.items()}
    save_file(tensors, str(path), metadata={"header": json.dumps(header, sort_keys=True)})


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    from safetensors import safe_open

    with safe_open(str(path), framework="numpy") as fh:
        header = json.loads(fh.metadata()["header"])
        params = {k: fh.get_tensor(k) for k in fh.keys()}
    return params, header
