"""
Visit graphs on a toy corpus
============================

Five admissions, two code types. We build the causal nearest-visit graph,
look at who feeds whom, and push random code embeddings through one GCN layer.
"""
import numpy as np
import torch

from notecode.visit_graph import GraphConfig, build_visit_graph, gcn_forward

ids = ["a1", "a2", "b1", "b2", "c1"]
days = [0, 3, 1, 4, 4]
diagnoses = [{"I10", "E11"}, {"I10", "N18"}, {"E11"}, {"I10", "E11", "N18"}, {"J44"}]

# keep the two most similar earlier (or same-day) visits, plus a self loop
g = build_visit_graph(ids, days, diagnoses, GraphConfig(k_neighbors=2))
for j, vid in enumerate(ids):
    srcs, w = g.in_edges(j)
    print(vid, "<-", [(ids[s], round(float(x), 3)) for s, x in zip(srcs, w)])

# every edge points forward in time
assert all(days[s] <= days[d] for s, d, _ in g.edges())

# softmax attention rows, padded to the widest in-degree
idx, alpha = g.neighbor_table()
print("attention rows sum to", alpha.sum(1))

# one GCN layer over 8-d node features
torch.manual_seed(0)
E = torch.randn(len(ids), 8)
W = torch.randn(8, 8) / 8 ** 0.5
h = gcn_forward(E, torch.from_numpy(idx), torch.from_numpy(alpha), W)
print("gcn output", tuple(h.shape))
