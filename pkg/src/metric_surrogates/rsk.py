"""Hand-crafted differentiable relaxation of recall@k.

Sorting and counting are replaced by temperature-scaled sigmoids: the rank of
a target is one plus the sigmoid-relaxed count of candidates scoring above
it, and top-k membership is a second sigmoid applied to the gap between the
rank and the counting threshold. The threshold sits halfway between k and
k+1 so integer ranks never land on the decision boundary, which makes the
relaxation converge to the exact metric as the temperatures shrink.

Also provided: similarity mixup over score columns (virtual candidates that
never exist as embedding vectors), a memory-bounded two-pass gradient scheme
for large batches, and the classes-per-batch sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, GraphMeter, Tensor, graph_meter

__all__ = [
    "SmoothParams",
    "SimilarityBlock",
    "BatchPlan",
    "smooth_heaviside",
    "similarity_matrix",
    "smooth_rank",
    "rsk_loss",
    "simix_expand",
    "virtual_virtual_similarity",
    "chunked_gradients",
    "chunked_loss_and_gradients",
    "sample_batch",
]


@dataclass(frozen=True)
class SmoothParams:
    """Temperatures and k values for the smooth recall loss.

    ``tau1`` controls rank counting, ``tau2`` the threshold at k. Defaults
    follow the large-batch retrieval setup this loss was designed for.
    """

    tau1: float = 1.0
    tau2: float = 0.01
    k_set: tuple = (1, 2, 4, 8, 16)

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError("temperatures must be positive")
        ks = tuple(int(k) for k in self.k_set)
        if not ks:
            raise ValueError("k_set must be non-empty")
        if any(k < 1 for k in ks):
            raise ValueError("k values must be positive")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("k_set must be strictly increasing")
        object.__setattr__(self, "k_set", ks)


class SimilarityBlock:
    """Pairwise similarity scores with label relations, the loss substrate.

    Rows are queries (always real samples), columns are candidates (real
    samples plus any virtual mixup columns). ``scores`` is a graph node so
    gradients can flow back to the embeddings that produced it.
    """

    def __init__(self, graph: Graph, scores: int, same_label: np.ndarray,
                 self_mask: np.ndarray, labels: np.ndarray, n_real: int,
                 virtual: tuple = ()):
        shape = graph.value(scores).shape
        if same_label.shape != shape or self_mask.shape != shape:
            raise ValueError("mask shapes must match the score matrix")
        self.graph = graph
        self.scores = scores
        self.same_label = same_label.astype(bool)
        self.self_mask = self_mask.astype(bool)
        self.labels = np.asarray(labels)
        self.n_real = int(n_real)
        self.virtual = tuple(virtual)

    @property
    def num_queries(self) -> int:
        return self.same_label.shape[0]

    @property
    def num_candidates(self) -> int:
        return self.same_label.shape[1]

    def score_values(self) -> np.ndarray:
        return self.graph.value(self.scores).array


@dataclass(frozen=True)
class BatchPlan:
    """Classes-per-batch sampling plan plus the gradient chunk size."""

    classes_per_batch: int
    samples_per_class: int
    chunk_size: int

    def __post_init__(self):
        if self.classes_per_batch < 1 or self.samples_per_class < 1:
            raise ValueError("plan sizes must be positive")
        if not (1 <= self.chunk_size <= self.batch_size):
            raise ValueError("chunk_size must be in [1, batch size]")

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.samples_per_class

    @staticmethod
    def default(num_classes: int, samples_per_class: int = 4, cap: int = 4000) -> "BatchPlan":
        """Batch of min(cap, samples_per_class * num_classes) samples."""
        batch = min(cap, samples_per_class * num_classes)
        classes = batch // samples_per_class
        return BatchPlan(classes, samples_per_class, chunk_size=batch)


def smooth_heaviside(x: Tensor, tau: float) -> Tensor:
    """Elementwise sigmoid(x / tau), the smooth step used for counting."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    a = x.array / tau
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor(out)


def similarity_matrix(graph: Graph, embeddings: int, labels) -> SimilarityBlock:
    """Cosine similarities of normalized embedding rows as a SimilarityBlock."""
    emb = graph.value(embeddings).array
    norms = np.linalg.norm(emb, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("similarity_matrix expects L2-normalized rows")
    labels = np.asarray(labels)
    n = emb.shape[0]
    if labels.shape[0] != n:
        raise ValueError("labels length must match embedding rows")
    scores = graph.matmul(embeddings, embeddings, transpose_b=True)
    vals = graph.value(scores).array
    if np.any(np.abs(vals) > 1.0 + 1e-9):
        raise ValueError("similarities of normalized rows must lie in [-1, 1]")
    same = labels[:, None] == labels[None, :]
    self_mask = np.eye(n, dtype=bool)
    return SimilarityBlock(graph, scores, same, self_mask, labels, n_real=n)


def smooth_rank(block: SimilarityBlock, query: int, target: int, tau1: float) -> float:
    """Sigmoid-relaxed rank of one candidate in one query's retrieval list."""
    if tau1 <= 0:
        raise ValueError("tau1 must be positive")
    q, m = block.num_queries, block.num_candidates
    if not (0 <= query < q) or not (0 <= target < m):
        raise IndexError(f"query/target ({query}, {target}) out of range for {q}x{m}")
    if block.self_mask[query, target]:
        raise ValueError("target is the query's own self entry")
    s = block.score_values()[query]
    cand = ~block.self_mask[query]
    cand[target] = False
    gaps = (s[cand] - s[target]) / tau1
    pos = gaps >= 0
    sig = np.empty_like(gaps)
    sig[pos] = 1.0 / (1.0 + np.exp(-gaps[pos]))
    e = np.exp(gaps[~pos])
    sig[~pos] = e / (1.0 + e)
    return 1.0 + float(sig.sum())


def _positive_pairs(same_label: np.ndarray, self_mask: np.ndarray):
    positives = same_label & ~self_mask
    counts = positives.sum(axis=1)
    if np.any(counts == 0):
        bad = int(np.argmin(counts))
        raise ValueError(f"query {bad} has no positive candidate")
    qidx, cidx = np.nonzero(positives)
    return qidx, cidx, counts


def _build_rank_nodes(g: Graph, scores: int, qidx: np.ndarray, cidx: np.ndarray,
                      self_mask_rows: np.ndarray, tau1: float) -> int:
    """Smooth ranks for a flattened (query, positive) pair list; (P, 1) node."""
    m = self_mask_rows.shape[1]
    p = len(qidx)
    ones_m1 = g.constant(np.ones((m, 1)))
    ones_1m = g.constant(np.ones((1, m)))

    spos = g.gather_rows(scores, qidx.tolist())
    onehot = np.zeros((p, m))
    onehot[np.arange(p), cidx] = 1.0
    tvec = g.matmul(g.mul(spos, g.constant(onehot)), ones_m1)
    tmat = g.matmul(tvec, ones_1m)
    gaps = g.scale(g.sub(spos, tmat), 1.0 / tau1)
    heavi = g.sigmoid(gaps)

    cand = ~self_mask_rows[qidx]
    cand[np.arange(p), cidx] = False
    counted = g.mul(heavi, g.constant(cand.astype(float)))
    return g.add(g.constant(np.ones((p, 1))), g.matmul(counted, ones_m1))


def _topk_score_sum(g: Graph, rank: int, qidx: np.ndarray, counts: np.ndarray,
                    num_queries: int, params: SmoothParams) -> int:
    """Sum over k and queries of clamped per-query smooth recall scores."""
    p = len(qidx)
    total = None
    ones_q1 = g.constant(np.ones((num_queries, 1)))
    for k in params.k_set:
        # Threshold halfway between k and k+1: integer ranks never sit on the
        # sigmoid midpoint, so the zero-temperature limit matches exact recall.
        arg = g.scale(g.sub(g.constant(np.full((p, 1), k + 0.5)), rank), 1.0 / params.tau2)
        term = g.sigmoid(arg)
        group = np.zeros((num_queries, p))
        group[qidx, np.arange(p)] = 1.0 / np.minimum(k, counts)[qidx]
        score = g.matmul(g.constant(group), term)
        # min(score, 1): smooth counts may briefly exceed capacity k.
        clamped = g.sub(score, g.relu(g.sub(score, ones_q1)))
        ksum = g.sum(clamped)
        total = ksum if total is None else g.add(total, ksum)
    return total


def rsk_loss(block: SimilarityBlock, params: SmoothParams) -> int:
    """Scalar graph node holding 1 - smoothed mean recall over ``k_set``.

    The value lies in [0, 1] and is differentiable with respect to whatever
    produced the block's score matrix. Every query row must have at least one
    positive candidate.
    """
    g = block.graph
    qidx, cidx, counts = _positive_pairs(block.same_label, block.self_mask)
    rank = _build_rank_nodes(g, block.scores, qidx, cidx, block.self_mask, params.tau1)
    total = _topk_score_sum(g, rank, qidx, counts, block.num_queries, params)
    norm = 1.0 / (block.num_queries * len(params.k_set))
    return g.sub(g.constant(np.ones(1)), g.scale(total, norm))


# -- similarity mixup ----------------------------------------------------------


def simix_expand(block: SimilarityBlock, lambdas=None, seed: int = 0,
                 num_virtual: int | None = None, rng: np.random.Generator | None = None,
                 ) -> SimilarityBlock:
    """Append virtual candidate columns built by mixing similarity scores.

    Each virtual candidate mixes a same-class pair (u, v) with coefficient
    lambda: its score column is ``lam * S[:, u] + (1 - lam) * S[:, v]``, which
    equals the similarity of the mixed embedding without materializing it.
    Virtual candidates are positive for queries of the pair's class and are
    never used as queries themselves.
    """
    if block.virtual:
        raise ValueError("simix_expand requires a block over real embeddings only")
    if rng is None:
        rng = np.random.default_rng(seed)
    n = block.n_real
    labels = block.labels
    if lambdas is not None:
        lambdas = [float(l) for l in lambdas]
        if any(not (0.0 <= l <= 1.0) for l in lambdas):
            raise ValueError("lambdas must lie in [0, 1]")
        if num_virtual is not None and num_virtual != len(lambdas):
            raise ValueError("num_virtual disagrees with len(lambdas)")
        num_virtual = len(lambdas)
    elif num_virtual is None:
        num_virtual = n

    classes = sorted(set(int(l) for l in labels))
    members = {c: np.nonzero(labels == c)[0] for c in classes}
    virtual = []
    for j in range(num_virtual):
        c = classes[int(rng.integers(len(classes)))]
        if len(members[c]) < 2:
            raise ValueError(f"class {c} has fewer than 2 samples; cannot mix a pair")
        u, v = rng.choice(members[c], size=2, replace=False)
        lam = lambdas[j] if lambdas is not None else float(rng.uniform())
        virtual.append((int(u), int(v), lam))

    g = block.graph
    v = len(virtual)
    mix = np.zeros((n, v))
    for j, (u, w, lam) in enumerate(virtual):
        mix[u, j] += lam
        mix[w, j] += 1.0 - lam
    vcols = g.matmul(block.scores, g.constant(mix))
    place_real = np.zeros((n, n + v))
    place_real[:, :n] = np.eye(n)
    place_virt = np.zeros((v, n + v))
    place_virt[:, n:] = np.eye(v)
    expanded = g.add(
        g.matmul(block.scores, g.constant(place_real)),
        g.matmul(vcols, g.constant(place_virt)),
    )

    q = block.num_queries
    same = np.zeros((q, n + v), dtype=bool)
    same[:, :n] = block.same_label
    selfm = np.zeros((q, n + v), dtype=bool)
    selfm[:, :n] = block.self_mask
    for j, (u, w, lam) in enumerate(virtual):
        same[:, n + j] = labels == labels[u]
    return SimilarityBlock(g, expanded, same, selfm, labels, n_real=n, virtual=tuple(virtual))


def virtual_virtual_similarity(block: SimilarityBlock, i: int, j: int) -> float:
    """Similarity between two virtual candidates, bilinear in the real scores."""
    if not (0 <= i < len(block.virtual)) or not (0 <= j < len(block.virtual)):
        raise IndexError("virtual candidate index out of range")
    s = block.score_values()[:, : block.n_real]
    u1, v1, l1 = block.virtual[i]
    u2, v2, l2 = block.virtual[j]
    return float(
        l1 * l2 * s[u1, u2]
        + l1 * (1 - l2) * s[u1, v2]
        + (1 - l1) * l2 * s[v1, u2]
        + (1 - l1) * (1 - l2) * s[v1, v2]
    )


# -- chunked large-batch gradients ----------------------------------------------


def _chunk_ranges(n: int, chunk: int):
    for start in range(0, n, chunk):
        yield start, min(start + chunk, n)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def chunked_loss_and_gradients(embeddings: Tensor, labels, params: SmoothParams,
                               chunk: int, meter: GraphMeter | None = None,
                               ) -> tuple[float, Tensor]:
    """Two-pass recall-surrogate gradients with O(chunk x n) live graphs.

    Pass one sweeps the batch chunk-by-chunk with plain array math, caching
    every smooth rank (and hence the loss) without building any graph. Pass
    two rebuilds each chunk's similarity slice as a small graph, accumulates
    its gradient contribution into a shared buffer, and releases the graph
    before moving on. Chunks could run on independent workers since each
    owns its graph; accumulation happens in chunk-index order either way, so
    results are deterministic and match the single-graph gradient to within
    accumulation-order rounding.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    emb = embeddings.array
    n = emb.shape[0]
    if chunk > n:
        raise ValueError(f"chunk {chunk} exceeds batch size {n}")
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    self_mask = np.eye(n, dtype=bool)
    qidx_all, cidx_all, counts = _positive_pairs(same, self_mask)
    k_set = params.k_set
    norm = 1.0 / (n * len(k_set))

    # Pass one: cached smooth ranks, chunk by chunk, no graphs retained.
    ranks = np.empty(len(qidx_all))
    for lo, hi in _chunk_ranges(n, chunk):
        sel = (qidx_all >= lo) & (qidx_all < hi)
        if not np.any(sel):
            continue
        sc = emb[lo:hi] @ emb.T
        q_local = qidx_all[sel] - lo
        c_sel = cidx_all[sel]
        gaps = (sc[q_local] - sc[q_local, c_sel][:, None]) / params.tau1
        heavi = _np_sigmoid(gaps)
        cand = ~self_mask[qidx_all[sel]]
        cand[np.arange(len(c_sel)), c_sel] = False
        ranks[sel] = 1.0 + (heavi * cand).sum(axis=1)

    total = 0.0
    for k in k_set:
        term = _np_sigmoid((k + 0.5 - ranks) / params.tau2)
        score = np.zeros(n)
        np.add.at(score, qidx_all, term / np.minimum(k, counts)[qidx_all])
        total += np.minimum(score, 1.0).sum()
    loss_value = 1.0 - total * norm

    # Pass two: per-chunk graphs, gradient accumulation, immediate release.
    grad = np.zeros_like(emb)
    for lo, hi in _chunk_ranges(n, chunk):
        sel = (qidx_all >= lo) & (qidx_all < hi)
        if not np.any(sel):
            continue
        g = Graph(meter=meter if meter is not None else graph_meter())
        eid = g.parameter(embeddings)
        rows = g.gather_rows(eid, list(range(lo, hi)))
        scores = g.matmul(rows, eid, transpose_b=True)
        q_local = (qidx_all[sel] - lo).astype(int)
        c_sel = cidx_all[sel].astype(int)
        rank = _build_rank_nodes(g, scores, q_local, c_sel, self_mask[lo:hi], params.tau1)
        partial = _topk_score_sum(g, rank, q_local, counts[lo:hi],
                                  hi - lo, params)
        grads = g.backward(partial)
        grad += grads[eid].array
        g.release()
    return loss_value, Tensor(-norm * grad)


def chunked_gradients(embeddings: Tensor, labels, params: SmoothParams, chunk: int,
                      meter: GraphMeter | None = None) -> Tensor:
    """Gradient of the recall surrogate with respect to the embeddings."""
    return chunked_loss_and_gradients(embeddings, labels, params, chunk, meter)[1]


# -- batch sampling --------------------------------------------------------------


def sample_batch(labels, plan: BatchPlan, rng) -> np.ndarray:
    """Sample ``classes_per_batch`` classes and ``samples_per_class`` indices each.

    Classes and member indices are drawn uniformly without replacement, and
    only classes with enough members are eligible. Deterministic for a given
    generator state or integer seed.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    labels = np.asarray(labels)
    classes = sorted(set(int(l) for l in labels))
    eligible = [c for c in classes if np.count_nonzero(labels == c) >= plan.samples_per_class]
    if len(eligible) < plan.classes_per_batch:
        raise ValueError(
            f"need {plan.classes_per_batch} classes with >= {plan.samples_per_class} "
            f"samples, only {len(eligible)} available"
        )
    chosen = rng.choice(len(eligible), size=plan.classes_per_batch, replace=False)
    out = []
    for ci in chosen:
        members = np.nonzero(labels == eligible[int(ci)])[0]
        picks = rng.choice(members, size=plan.samples_per_class, replace=False)
        out.extend(int(p) for p in picks)
    return np.array(out, dtype=int)
