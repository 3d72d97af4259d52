#!/usr/bin/env python3
"""Training embeddings with the smooth recall@k loss.

Sorting and counting are replaced by sigmoids: the rank of a positive is a
smooth count of the candidates scoring above it, and its top-k membership is
a second sigmoid on (k + 1/2 - rank). The script shows the loss converging
to 1 - recall as temperatures shrink, then trains a small embedder and
reports the exact metric improving.
"""

import numpy as np

from metric_surrogates import Graph, Optimizer, SmoothParams, Tensor, rsk_loss, similarity_matrix
from metric_surrogates.acceptance import exact_recall_from_scores
from metric_surrogates.config import ExperimentConfig
from metric_surrogates.experiments import train_rsk

print("=" * 64)
print("1. The smooth loss approaches 1 - exact recall as tau -> 0")
print("=" * 64)
rng = np.random.default_rng(1)
emb = rng.standard_normal((10, 4))
emb /= np.linalg.norm(emb, axis=1, keepdims=True)
labels = np.repeat(np.arange(5), 2)
for tau in (1.0, 0.1, 0.01, 0.001):
    g = Graph()
    block = similarity_matrix(g, g.parameter(Tensor(emb)), labels)
    smooth = g.value(rsk_loss(block, SmoothParams(tau, tau, (1, 2)))).item()
    exact = np.mean([
        exact_recall_from_scores(block.score_values(), block.same_label,
                                 block.self_mask, k)
        for k in (1, 2)
    ])
    print(f"  tau={tau:<6} smooth loss {smooth:.4f}   1 - exact recall {1 - exact:.4f}")
    g.release()

print()
print("=" * 64)
print("2. Desk-scale training: 8 Gaussian classes, 16 points each")
print("=" * 64)
cfg = ExperimentConfig.from_dict({
    "kind": "rsk",
    "seed": 0,
    "schedule": {"steps": 200, "eval_every": 20},
})
series = train_rsk(cfg, simix=False)
print("   step   loss     exact recall@1")
for i, (l, r) in enumerate(zip(series["loss"], series["recall@1"])):
    print(f"   {20 * (i + 1):>4}   {l:.4f}   {r:.3f}")
print("the loss is differentiable end to end; recall@1 is evaluated exactly")
