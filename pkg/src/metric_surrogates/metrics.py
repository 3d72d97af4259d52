"""Exact, non-differentiable evaluation metrics and their verification oracles.

Everything here is a pure function over plain values: Levenshtein distance,
recall@k over labeled embeddings, axis-aligned and rotated box IoU, and a kNN
classifier. These are the quantities the differentiable surrogates in the
rest of the package approximate, so they are kept deliberately independent of
the autodiff engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

__all__ = [
    "SymbolSeq",
    "Box",
    "LabeledEmbeddings",
    "edit_distance",
    "edit_distance_naive",
    "total_edit_distance",
    "recall_at_k",
    "iou_axis_aligned",
    "iou_rotated",
    "iou_monte_carlo",
    "knn_classify",
]


@dataclass(frozen=True)
class SymbolSeq:
    """Sequence over a finite alphabet, stored as indices below ``alphabet_size``."""

    symbols: tuple
    alphabet_size: int

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(int(s) for s in self.symbols))
        if self.alphabet_size < 1:
            raise ValueError("alphabet_size must be positive")
        for s in self.symbols:
            if not (0 <= s < self.alphabet_size):
                raise ValueError(f"symbol {s} outside alphabet of size {self.alphabet_size}")

    def __len__(self):
        return len(self.symbols)


@dataclass(frozen=True)
class Box:
    """Axis-aligned or rotated rectangle.

    Axis-aligned boxes use ``(x_min, y_min, x_max, y_max)``; rotated boxes use
    ``(cx, cy, width, height, angle)`` with the angle in radians.
    """

    kind: str
    coords: tuple

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(float(c) for c in self.coords))
        if self.kind == "axis":
            x0, y0, x1, y1 = self.coords
            if x0 > x1 or y0 > y1:
                raise ValueError(f"axis box has min > max: {self.coords}")
        elif self.kind == "rotated":
            _, _, w, h, _ = self.coords
            if w < 0 or h < 0:
                raise ValueError(f"rotated box has negative extent: {self.coords}")
        else:
            raise ValueError(f"unknown box kind {self.kind!r}")

    @staticmethod
    def axis(x_min: float, y_min: float, x_max: float, y_max: float) -> "Box":
        return Box("axis", (x_min, y_min, x_max, y_max))

    @staticmethod
    def rotated(cx: float, cy: float, width: float, height: float, angle: float) -> "Box":
        return Box("rotated", (cx, cy, width, height, angle))

    def corners(self) -> np.ndarray:
        """Corner coordinates in counter-clockwise order."""
        if self.kind == "axis":
            x0, y0, x1, y1 = self.coords
            return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
        cx, cy, w, h, ang = self.coords
        c, s = math.cos(ang), math.sin(ang)
        half = np.array([[-w, -h], [w, -h], [w, h], [-w, h]]) / 2.0
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + np.array([cx, cy])

    def area(self) -> float:
        if self.kind == "axis":
            x0, y0, x1, y1 = self.coords
            return (x1 - x0) * (y1 - y0)
        _, _, w, h, _ = self.coords
        return w * h


@dataclass
class LabeledEmbeddings:
    """Row-normalized embedding matrix with one class id per row."""

    embeddings: Tensor
    labels: list = field(default_factory=list)

    def __post_init__(self):
        arr = self.embeddings.array
        if arr.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got {arr.shape}")
        if len(self.labels) != arr.shape[0]:
            raise ValueError("labels length must match embedding rows")
        norms = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("embedding rows must be L2-normalized to 1 +/- 1e-9")
        self.labels = [int(l) for l in self.labels]

    @staticmethod
    def from_features(features: Tensor, labels) -> "LabeledEmbeddings":
        """Normalize raw feature rows and attach labels."""
        arr = features.array
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ValueError("cannot normalize a zero feature row")
        return LabeledEmbeddings(Tensor(arr / norms), list(labels))

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]


# -- edit distance ------------------------------------------------------------


def edit_distance(a: SymbolSeq, b: SymbolSeq) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    sa, sb = a.symbols, b.symbols
    if len(sa) == 0:
        return len(sb)
    if len(sb) == 0:
        return len(sa)
    prev = list(range(len(sb) + 1))
    for i, ca in enumerate(sa, start=1):
        cur = [i] + [0] * len(sb)
        for j, cb in enumerate(sb, start=1):
            cost = 0 if ca == cb else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1]


_NAIVE_CAP = 8


def edit_distance_naive(a: SymbolSeq, b: SymbolSeq) -> int:
    """Memoization-free recursive edit distance; oracle for the dynamic program.

    Exponential in the input lengths, so both are capped at 8.
    """
    if len(a) > _NAIVE_CAP or len(b) > _NAIVE_CAP:
        raise ValueError(f"edit_distance_naive limited to length {_NAIVE_CAP}")

    def rec(i: int, j: int) -> int:
        if i == len(a.symbols):
            return len(b.symbols) - j
        if j == len(b.symbols):
            return len(a.symbols) - i
        cost = 0 if a.symbols[i] == b.symbols[j] else 1
        return min(rec(i + 1, j) + 1, rec(i, j + 1) + 1, rec(i + 1, j + 1) + cost)

    return rec(0, 0)


def total_edit_distance(pairs) -> int:
    """Sum of per-pair edit distances, the aggregate used to compare runs."""
    return sum(edit_distance(a, b) for a, b in pairs)


# -- ranking ------------------------------------------------------------------


def _ranked_candidates(sims: np.ndarray, query: int) -> list[int]:
    # Descending similarity, ties broken by ascending index; the query itself
    # is excluded from its own candidate list.
    order = sorted(
        (i for i in range(sims.shape[0]) if i != query),
        key=lambda i: (-sims[i], i),
    )
    return order


def recall_at_k(data: LabeledEmbeddings, k: int) -> float:
    """Mean fraction of each query's positives retrieved in its top-k.

    Per query the count of same-label rows in the top-k is normalized by
    ``min(k, #positives)`` so a perfect ranking scores 1. Queries without any
    positive are skipped.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    arr = data.embeddings.array
    labels = np.asarray(data.labels)
    sims = arr @ arr.T
    scores = []
    for q in range(arr.shape[0]):
        positives = {i for i in range(arr.shape[0]) if i != q and labels[i] == labels[q]}
        if not positives:
            continue
        top = _ranked_candidates(sims[q], q)[:k]
        hits = sum(1 for i in top if i in positives)
        scores.append(hits / min(k, len(positives)))
    if not scores:
        raise ValueError("no query has a positive sample")
    return float(np.mean(scores))


def knn_classify(train: LabeledEmbeddings, query: Tensor, k: int) -> int:
    """Majority label among the k most cosine-similar training rows.

    Vote ties are broken by the label of the nearest neighbor among the tied
    labels, then by the smallest label id.
    """
    if train.n == 0:
        raise ValueError("empty training set")
    if not (1 <= k <= train.n):
        raise ValueError(f"k must be in [1, {train.n}], got {k}")
    q = query.array.reshape(-1)
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise ValueError("query vector has zero norm")
    q = q / norm
    sims = train.embeddings.array @ q
    order = sorted(range(train.n), key=lambda i: (-sims[i], i))[:k]
    votes: dict[int, int] = {}
    for i in order:
        votes[train.labels[i]] = votes.get(train.labels[i], 0) + 1
    best = max(votes.values())
    tied = sorted(l for l, v in votes.items() if v == best)
    if len(tied) == 1:
        return tied[0]
    for i in order:  # nearest neighbor whose label is among the tied ones
        if train.labels[i] in tied:
            return train.labels[i]
    return tied[0]


# -- intersection over union ----------------------------------------------------


def iou_axis_aligned(a: Box, b: Box) -> float:
    """IoU of two axis-aligned boxes; 0 when the union has zero area."""
    if a.kind != "axis" or b.kind != "axis":
        raise ValueError("iou_axis_aligned requires axis-aligned boxes")
    ax0, ay0, ax1, ay1 = a.coords
    bx0, by0, bx1, by1 = b.coords
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _clip_polygon(poly: np.ndarray, edge_a: np.ndarray, edge_b: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by the half-plane left of a->b."""
    if len(poly) == 0:
        return poly
    d = edge_b - edge_a
    out = []
    n = len(poly)
    for i in range(n):
        cur, nxt = poly[i], poly[(i + 1) % n]
        side_cur = d[0] * (cur[1] - edge_a[1]) - d[1] * (cur[0] - edge_a[0])
        side_nxt = d[0] * (nxt[1] - edge_a[1]) - d[1] * (nxt[0] - edge_a[0])
        if side_cur >= 0:
            out.append(cur)
        if (side_cur > 0 and side_nxt < 0) or (side_cur < 0 and side_nxt > 0):
            t = side_cur / (side_cur - side_nxt)
            out.append(cur + t * (nxt - cur))
    return np.array(out) if out else np.empty((0, 2))


def _shoelace(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def iou_rotated(a: Box, b: Box) -> float:
    """IoU of two (possibly rotated) rectangles via polygon clipping."""
    pa, pb = a.corners(), b.corners()
    area_a, area_b = a.area(), b.area()
    clipped = pa
    for i in range(4):
        clipped = _clip_polygon(clipped, pb[i], pb[(i + 1) % 4])
        if len(clipped) == 0:
            break
    inter = _shoelace(clipped)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def iou_monte_carlo(a: Box, b: Box, samples: int = 10_000_000, seed: int = 0) -> float:
    """Sampling-based IoU oracle, independent of the clipping implementation.

    Points are drawn with a scrambled Sobol sequence over the bounding box of
    both rectangles; low-discrepancy sampling keeps the area estimate within
    the advertised 1e-3 of truth at 1e7 samples.
    """
    from scipy.stats import qmc

    pa, pb = a.corners(), b.corners()
    allpts = np.vstack([pa, pb])
    lo = allpts.min(axis=0)
    hi = allpts.max(axis=0)
    span = hi - lo
    box_area = float(span[0] * span[1])
    if box_area <= 0.0:
        return 0.0

    def half_planes(corners: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # Inside means left of every CCW edge: n . p >= offset.
        normals, offsets = [], []
        for i in range(4):
            p0, p1 = corners[i], corners[(i + 1) % 4]
            n = np.array([-(p1[1] - p0[1]), p1[0] - p0[0]])
            normals.append(n)
            offsets.append(n @ p0)
        return np.array(normals), np.array(offsets)

    na, oa = half_planes(pa)
    nb, ob = half_planes(pb)
    # One fused projection against all eight half-planes per chunk.
    normals = np.vstack([na, nb]).T
    offsets = np.concatenate([oa, ob]) - 1e-12

    import warnings

    sob = qmc.Sobol(d=2, scramble=True, seed=seed)
    inside_both = 0
    remaining = samples
    chunk = 1 << 18
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # non power-of-two draws
        while remaining > 0:
            m = min(chunk, remaining)
            pts = lo + sob.random(m) * span
            inside = (pts @ normals >= offsets).all(axis=1)
            inside_both += int(np.count_nonzero(inside))
            remaining -= m
    inter = box_area * inside_both / samples
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union
