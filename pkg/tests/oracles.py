"""Naive reference implementations used as test oracles.

Each one is written from the definition with plain loops, sharing no code
with the package, so agreement is meaningful.
"""
from __future__ import annotations

import hashlib
import math
import re
from itertools import combinations

import numpy as np


def jaccard_oracle(Y, Y_hat):
    per_visit = []
    for y, p in zip(Y, Y_hat):
        inter = sum(1 for a in y if a in p)
        union = len(y) + len(p) - inter
        per_visit.append(1.0 if union == 0 else inter / union)
    return math.fsum(per_visit) / len(Y)


def prf_oracle(Y, Y_hat):
    P, R, F = [], [], []
    for y, p in zip(Y, Y_hat):
        inter = sum(1 for a in p if a in y)
        prec = inter / len(p) if len(p) else 0.0
        rec = inter / len(y) if len(y) else 0.0
        P.append(prec)
        R.append(rec)
        F.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
    n = len(Y)
    return math.fsum(P) / n, math.fsum(R) / n, math.fsum(F) / n


def average_precision_oracle(scores, labels):
    """Threshold sweep over distinct scores, descending, summing P * dR."""
    scores = [float(s) for s in scores]
    labels = [bool(l) for l in labels]
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        chosen = [l for s, l in zip(scores, labels) if s >= thr]
        tp = sum(chosen)
        precision = tp / len(chosen)
        recall = tp / n_pos
        ap += precision * (recall - prev_recall)
        prev_recall = recall
    return ap


def prauc_oracle(score_rows, target_rows):
    vals = [average_precision_oracle(s, y) for s, y in zip(score_rows, target_rows) if any(y)]
    return sum(vals) / len(vals) if vals else 0.0


def ddi_oracle(Y_hat, pairs):
    bad = {frozenset(p) for p in pairs}
    hit = tot = 0
    for p in Y_hat:
        for a, b in combinations(sorted(p), 2):
            tot += 1
            hit += frozenset((a, b)) in bad
    return hit / tot if tot else 0.0


def bce_oracle(p, y, eps=1e-7):
    total = 0.0
    for row_p, row_y in zip(np.atleast_2d(p), np.atleast_2d(y)):
        for pi, yi in zip(row_p, row_y):
            q = min(max(float(pi), eps), 1 - eps)
            total -= yi * math.log(q) + (1 - yi) * math.log(1 - q)
    return total


def margin_oracle(p, y):
    total = 0.0
    for row_p, row_y in zip(np.atleast_2d(p), np.atleast_2d(y)):
        C = len(row_p)
        for i in range(C):
            if row_y[i]:
                continue
            for j in range(C):
                if row_y[j]:
                    total += max(0.0, 1.0 - (row_p[j] - row_p[i])) / C
    return total


def graph_oracle(visit_ids, times, code_sets, K, self_loop=True):
    """Exhaustive neighbour selection: rank every earlier-or-equal visit by
    (Jaccard desc, admission desc, id asc), keep K, add the self loop."""
    def jac(a, b):
        a, b = set(a), set(b)
        u = len(a | b)
        return len(a & b) / u if u else 0.0

    edges = set()
    for j in range(len(visit_ids)):
        cands = [t for t in range(len(visit_ids)) if t != j and times[t] <= times[j]]
        ranked = sorted(cands, key=lambda t: (-jac(code_sets[t], code_sets[j]), -times[t], visit_ids[t]))
        for t in ranked[:K]:
            edges.add((t, j, jac(code_sets[t], code_sets[j])))
        if self_loop:
            edges.add((j, j, 1.0))
    return edges


_MED = re.compile(r"^MED(\d+)(?![0-9A-Za-z])")


def stub_vector_oracle(token, layer, seed, H, reserved, scale=8.0):
    """Recompute a stub hidden vector from its published recipe."""
    m = _MED.match(token)
    v = np.zeros(H)
    if m and int(m.group(1)) < reserved:
        v[int(m.group(1))] = scale
        return v
    key = hashlib.blake2b(f"{seed}\x1f{layer}\x1f{token}".encode(), digest_size=8).digest()
    v[reserved:] = np.random.default_rng(int.from_bytes(key, "little")).standard_normal(H - reserved)
    return v
