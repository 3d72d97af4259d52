"""Supervised contrastive losses, plain and with trainable class prototypes.

The extended variant appends one trainable prototype row per class to the
candidate set and treats the anchor's own prototype as an extra positive, so
a single loss trains backbone embeddings and classifier weights jointly while
keeping a softmax-style probabilistic readout over the prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor

__all__ = [
    "ClassifierPrototypes",
    "supcon_loss",
    "esupcon_loss",
    "predict_proba",
]


@dataclass
class ClassifierPrototypes:
    """One L2-normalized row per class plus a readout temperature."""

    weights: Tensor
    temperature: float = 0.1

    def __post_init__(self):
        arr = self.weights.array
        if arr.ndim != 2:
            raise ValueError(f"prototype matrix must be 2-D, got {arr.shape}")
        norms = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("prototype rows must be L2-normalized to 1 +/- 1e-9")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @staticmethod
    def random(num_classes: int, dim: int, rng: np.random.Generator,
               temperature: float = 0.1) -> "ClassifierPrototypes":
        w = rng.standard_normal((num_classes, dim))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        return ClassifierPrototypes(Tensor(w), temperature)

    @staticmethod
    def renormalized(weights: Tensor, temperature: float = 0.1) -> "ClassifierPrototypes":
        """Project rows back onto the unit sphere, e.g. after an optimizer step."""
        arr = weights.array
        return ClassifierPrototypes(
            Tensor(arr / np.linalg.norm(arr, axis=1, keepdims=True)), temperature
        )


def _check_positives(labels: np.ndarray):
    values, counts = np.unique(labels, return_counts=True)
    lonely = values[counts < 2]
    if lonely.size:
        raise ValueError(f"anchor of class {int(lonely[0])} has no positive in batch")


def supcon_loss(graph: Graph, embeddings: int, labels, tau: float) -> int:
    """Supervised contrastive loss over a batch of normalized embeddings.

    For each anchor, the mean log-probability of its same-class candidates is
    maximized against all other batch members. Returns a scalar node id.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    labels = np.asarray(labels)
    n = graph.value(embeddings).shape[0]
    if labels.shape[0] != n:
        raise ValueError("labels length must match batch size")
    if n < 2:
        raise ValueError("batch must contain at least 2 samples")
    _check_positives(labels)

    sims = graph.scale(graph.matmul(embeddings, embeddings, transpose_b=True), 1.0 / tau)
    non_self = (~np.eye(n, dtype=bool)).astype(float)
    pos = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)

    ones = graph.constant(np.ones((n, 1)))
    denom = graph.log(graph.matmul(graph.mul(graph.exp(sims), graph.constant(non_self)), ones))
    pos_mean = graph.matmul(
        graph.mul(sims, graph.constant(pos / pos.sum(axis=1, keepdims=True))), ones
    )
    return graph.mean(graph.sub(denom, pos_mean))


def esupcon_loss(graph: Graph, embeddings: int, labels,
                 prototypes: int, tau: float) -> int:
    """Joint contrastive loss over batch embeddings and class prototypes.

    Candidates for anchor i are the other batch members plus every prototype
    row; positives are the same-class members plus the anchor's own class
    prototype, with other-class prototypes acting as negatives. Gradients
    reach both the embeddings and the prototype matrix.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    labels = np.asarray(labels)
    n = graph.value(embeddings).shape[0]
    c = graph.value(prototypes).shape[0]
    if labels.shape[0] != n:
        raise ValueError("labels length must match batch size")
    if c < 2:
        raise ValueError("need at least 2 classes of prototypes")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("labels must index prototype rows")
    _check_positives(labels)

    cands = graph.concat_rows([embeddings, prototypes])
    sims = graph.scale(graph.matmul(embeddings, cands, transpose_b=True), 1.0 / tau)

    non_self = np.ones((n, n + c), dtype=bool)
    non_self[:, :n] = ~np.eye(n, dtype=bool)
    pos = np.zeros((n, n + c), dtype=bool)
    pos[:, :n] = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    pos[np.arange(n), n + labels] = True

    ones = graph.constant(np.ones((n + c, 1)))
    denom = graph.log(
        graph.matmul(graph.mul(graph.exp(sims), graph.constant(non_self.astype(float))), ones)
    )
    pos_mean = graph.matmul(
        graph.mul(sims, graph.constant(pos / pos.sum(axis=1, keepdims=True))), ones
    )
    return graph.mean(graph.sub(denom, pos_mean))


def predict_proba(embedding: Tensor, protos: ClassifierPrototypes) -> Tensor:
    """Softmax class distribution from prototype similarities."""
    z = embedding.array.reshape(-1)
    logits = (protos.weights.array @ z) / protos.temperature
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return Tensor(e / e.sum())
