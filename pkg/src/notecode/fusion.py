"""Text-fusion patterns for other medication recommenders.

Each function takes the host model's internal tensors (memory outputs,
RNN summaries, decoder states, ...) as plain arrays and applies only the
step where the reduced text representation ``r_prime`` joins in. Weights
are passed explicitly; layers are ``(W, b)`` pairs applied as ``x @ W + b``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np


def _vec(x, name: str, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be a vector, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise ValueError(f"{name} has length {x.shape[0]}, expected {dim}")
    return x


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def linear(x, W, b=None) -> np.ndarray:
    x, W = np.asarray(x, dtype=np.float64), np.asarray(W, dtype=np.float64)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight {W.shape}")
    y = x @ W
    return y if b is None else y + np.asarray(b, dtype=np.float64)


def mlp(x, layers: Sequence[tuple], activation=lambda z: np.maximum(z, 0.0)) -> np.ndarray:
    """Linear layers with ``activation`` between them (none after the last)."""
    for i, (W, b) in enumerate(layers):
        x = linear(x, W, b)
        if i < len(layers) - 1:
            x = activation(x)
    return x


def concat(*parts) -> np.ndarray:
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


def split(vector, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat` for known component lengths."""
    vector = np.asarray(vector)
    if vector.shape[-1] != sum(sizes):
        raise ValueError("sizes do not add up to the vector length")
    return np.split(vector, np.cumsum(sizes)[:-1], axis=-1)


# ---------------------------------------------------------------------------
# G-BERT


def history_mean(history: Sequence, t: int, dim: int) -> np.ndarray:
    """(1/t) * sum of the visits before t (1-based); the zero padding vector when t == 1.

    The divisor is t, not t - 1, matching the prediction-layer formula.
    """
    if t < 1:
        raise ValueError("visit index is 1-based")
    past = [np.asarray(h, dtype=np.float64) for h in history[: t - 1]]
    if not past:
        return np.zeros(dim)
    return np.sum(past, axis=0) / t


def fuse_gbert(mean_diag_hist, mean_med_hist, v_d_t, r_prime, W1, b) -> np.ndarray:
    x = concat(_vec(mean_diag_hist, "mean_diag_hist"), _vec(mean_med_hist, "mean_med_hist"),
               _vec(v_d_t, "v_d_t"), _vec(r_prime, "r_prime"))
    return sigmoid(linear(x, W1, b))


# ---------------------------------------------------------------------------
# GAMENet


def fuse_gamenet(h_d, h_p, r_prime, f_layers, o_d, o_p, W_out, b_out=None):
    """Query from [h_d, h_p, r'] through ``f``; probabilities from [q, o_d, o_p]."""
    q = mlp(concat(_vec(h_d, "h_d"), _vec(h_p, "h_p"), _vec(r_prime, "r_prime")), f_layers)
    probs = sigmoid(linear(concat(q, _vec(o_d, "o_d"), _vec(o_p, "o_p")), W_out, b_out))
    return q, probs


# ---------------------------------------------------------------------------
# SafeDrug


def fuse_safedrug(d_h, p_h, r_prime, nn1_layers) -> np.ndarray:
    """Patient representation NN1([d_h, p_h, r'])."""
    return mlp(concat(_vec(d_h, "d_h"), _vec(p_h, "p_h"), _vec(r_prime, "r_prime")), nn1_layers)


# ---------------------------------------------------------------------------
# COGNet


def layer_norm(x, eps: float = 1e-5, gamma=None, beta=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def multi_head_attention(query, key, value, params: dict, n_heads: int) -> np.ndarray:
    """Scaled dot-product attention with per-head splits.

    ``params`` holds Wq, Wk, Wv, Wo (d x d) and optional bq, bk, bv, bo.
    Rows of ``query`` attend over rows of ``key``/``value``.
    """
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    k = np.atleast_2d(np.asarray(key, dtype=np.float64))
    v = np.atleast_2d(np.asarray(value, dtype=np.float64))
    d = q.shape[-1]
    if d % n_heads:
        raise ValueError(f"{n_heads} heads do not divide width {d}")
    if k.shape[0] != v.shape[0]:
        raise ValueError("key and value lengths differ")
    Q = linear(q, params["Wq"], params.get("bq"))
    K = linear(k, params["Wk"], params.get("bk"))
    V = linear(v, params["Wv"], params.get("bv"))
    dh = d // n_heads
    heads = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = Q[:, sl] @ K[:, sl].T / np.sqrt(dh)
        heads.append(softmax(scores, axis=-1) @ V[:, sl])
    return linear(np.concatenate(heads, axis=-1), params["Wo"], params.get("bo"))


def fuse_cognet(M_hat, D_enc, P_enc, r_prime, attn: dict, n_heads: int = 1,
                W_g=None, b_g=None):
    """LayerNorm(M + MH(M,D,D) + MH(M,P,P) + MH(M,r',r')).

    ``attn`` maps "diag", "proc" and "text" to attention parameter dicts.
    When ``W_g`` is given, also returns the generation distribution
    softmax(M'[i-1] W_g + b_g) for every decoder position.
    """
    M = np.atleast_2d(np.asarray(M_hat, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r_prime, dtype=np.float64))
    for name, x in (("D_enc", D_enc), ("P_enc", P_enc), ("r_prime", r)):
        if np.asarray(x).shape[-1] != M.shape[-1]:
            raise ValueError(f"{name} width does not match decoder state width {M.shape[-1]}")
    out = layer_norm(
        M
        + multi_head_attention(M, D_enc, D_enc, attn["diag"], n_heads)
        + multi_head_attention(M, P_enc, P_enc, attn["proc"], n_heads)
        + multi_head_attention(M, r, r, attn["text"], n_heads)
    )
    if W_g is None:
        return out
    return out, softmax(linear(out, W_g, b_g), axis=-1)


def text_visit_vector(r_rows) -> np.ndarray:
    """Self-gated pooling of a visit's text rows: softmax_k(tanh(r_k) . r_k) weighted sum."""
    r = np.atleast_2d(np.asarray(r_rows, dtype=np.float64))
    weights = softmax(np.sum(np.tanh(r) * r, axis=-1))
    return weights @ r


def cognet_visit_scores(r_prime_seq, v_d_seq, v_p_seq, v_t_d, v_t_p, s: float,
                        v_t_r=None, include_text: bool = False):
    """Copy-module visit selection scores over past visits.

    Returns ``(c, v_r)``: the softmax scores and the pooled text vector of
    each past visit. The text term joins the score only with ``include_text``.
    """
    if s <= 0:
        raise ValueError("scaling constant must be positive")
    v_d_seq = np.atleast_2d(np.asarray(v_d_seq, dtype=np.float64))
    v_p_seq = np.atleast_2d(np.asarray(v_p_seq, dtype=np.float64))
    v_r = np.stack([text_visit_vector(r) for r in r_prime_seq]) if len(r_prime_seq) else np.zeros((0, 0))
    logits = v_d_seq @ _vec(v_t_d, "v_t_d") + v_p_seq @ _vec(v_t_p, "v_t_p")
    if include_text:
        if v_t_r is None:
            raise ValueError("include_text needs the current visit's text vector")
        logits = logits + v_r @ _vec(v_t_r, "v_t_r")
    return softmax(logits / np.sqrt(s)), v_r


# ---------------------------------------------------------------------------
# SHAPE


def fuse_shape(V_d, V_p, V_m_prev, r_prime) -> np.ndarray:
    return concat(V_d, V_p, V_m_prev, r_prime)


# ---------------------------------------------------------------------------
# StratMed


def fuse_stratmed(e_d, e_p, e_m, r_prime, mlp_layers, stage: str = "pretrain") -> np.ndarray:
    """MLP over [e_d, e_p, e_m, r'].

    In the pretrain stage ``e_m`` is the previous visit's medication
    embedding; in the train stage the three code inputs are RNN summaries.
    """
    if stage not in ("pretrain", "train"):
        raise ValueError(f"unknown stage {stage!r}")
    return mlp(concat(_vec(e_d, "e_d"), _vec(e_p, "e_p"), _vec(e_m, "e_m"), _vec(r_prime, "r_prime")),
               mlp_layers)


def stratmed_select(e_h, delta: float) -> np.ndarray:
    return (np.asarray(e_h, dtype=np.float64) >= delta).astype(np.int64)
