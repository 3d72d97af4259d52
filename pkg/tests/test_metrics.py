import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metric_surrogates.autodiff import Tensor
from metric_surrogates.metrics import (
    Box,
    LabeledEmbeddings,
    SymbolSeq,
    edit_distance,
    edit_distance_naive,
    iou_axis_aligned,
    iou_monte_carlo,
    iou_rotated,
    knn_classify,
    recall_at_k,
    total_edit_distance,
)

seqs = st.lists(st.integers(0, 3), max_size=10).map(lambda s: SymbolSeq(tuple(s), 4))
short_seqs = st.lists(st.integers(0, 3), max_size=6).map(lambda s: SymbolSeq(tuple(s), 4))


def seq(*symbols, alphabet=26):
    return SymbolSeq(tuple(symbols), alphabet)


class TestEditDistance:
    def test_identity(self):
        s = seq(1, 2, 3, 4)
        assert edit_distance(s, s) == 0

    def test_empty_vs_any(self):
        s = seq(5, 6, 7)
        empty = SymbolSeq((), 26)
        assert edit_distance(empty, s) == 3
        assert edit_distance(s, empty) == 3

    def test_kitten_sitting(self):
        # k i t t e n / s i t t i n g over a alphabet of letter codes
        def enc(word):
            return SymbolSeq(tuple(ord(c) - ord("a") for c in word), 26)

        assert edit_distance(enc("kitten"), enc("sitting")) == 3
        assert edit_distance_naive(enc("kitten"), enc("sitting")) == 3

    def test_naive_examples(self):
        assert edit_distance_naive(seq(0, 1), seq(1, 0)) == 2
        assert edit_distance_naive(seq(0), seq(1)) == 1

    def test_naive_length_cap(self):
        long = SymbolSeq(tuple([0] * 9), 4)
        with pytest.raises(ValueError):
            edit_distance_naive(long, seq(0))

    def test_total(self):
        assert total_edit_distance([]) == 0
        s = seq(1, 2)
        assert total_edit_distance([(s, s), (s, s)]) == 0
        assert total_edit_distance([(seq(0, 1, 2), seq(3, 4, 5)),
                                    (seq(0, 0), seq(0,))]) == 4

    @given(short_seqs, short_seqs)
    @settings(max_examples=250, deadline=None)
    def test_dp_equals_naive(self, a, b):
        assert edit_distance(a, b) == edit_distance_naive(a, b)

    @given(seqs, seqs, seqs)
    @settings(max_examples=250, deadline=None)
    def test_metric_axioms(self, x, y, z):
        dxy = edit_distance(x, y)
        assert dxy == edit_distance(y, x)
        assert (dxy == 0) == (x.symbols == y.symbols)
        assert dxy <= edit_distance(x, z) + edit_distance(z, y)

    def test_symbol_validation(self):
        with pytest.raises(ValueError):
            SymbolSeq((4,), 4)


def _embeddings(rows, labels):
    arr = np.asarray(rows, dtype=float)
    arr = arr / np.linalg.norm(arr, axis=1, keepdims=True)
    return LabeledEmbeddings(Tensor(arr), labels)


class TestRecallAtK:
    def test_perfect_clusters(self):
        data = _embeddings(
            [[1, 0.01], [1, -0.01], [-1, 0.01], [-1, -0.01]], [0, 0, 1, 1]
        )
        assert recall_at_k(data, 1) == 1.0

    def test_sole_positive_ranked_third(self):
        # the two class-0 members are mutually orthogonal while both negatives
        # sit between them, so each query's sole positive ranks 3rd
        data = _embeddings(
            [[1, 0, 0], [0, 1, 0], [0.707, 0.707, 0], [0.72, 0.69, 0]],
            [0, 0, 1, 2],
        )
        assert recall_at_k(data, 2) == 0.0

    def test_matches_exhaustive_sort_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = int(rng.integers(4, 13))
            arr = rng.standard_normal((n, 4))
            labels = rng.integers(0, 3, size=n).tolist()
            counts = {l: labels.count(l) for l in set(labels)}
            if all(c < 2 for c in counts.values()):
                labels[1] = labels[0]
            data = LabeledEmbeddings.from_features(Tensor(arr), labels)
            sims = data.embeddings.array @ data.embeddings.array.T
            for k in (1, 2, 3):
                expected = []
                for q in range(n):
                    pos = [i for i in range(n) if i != q and labels[i] == labels[q]]
                    if not pos:
                        continue
                    ranked = sorted((i for i in range(n) if i != q),
                                    key=lambda i: (-sims[q, i], i))
                    hits = sum(1 for i in ranked[:k] if labels[i] == labels[q])
                    expected.append(hits / min(k, len(pos)))
                assert recall_at_k(data, k) == pytest.approx(np.mean(expected), abs=1e-12)

    def test_k_validation(self):
        data = _embeddings([[1, 0], [0.9, 0.1]], [0, 0])
        with pytest.raises(ValueError):
            recall_at_k(data, 0)

    def test_normalization_makes_perfect_ranking_score_one(self):
        # 3 positives each, k=4 > #positives: denominator is #positives, and a
        # perfect ranking therefore scores exactly 1
        data = _embeddings(
            [[1, 0.01], [1, -0.01], [1, 0.02], [1, -0.02], [-1, 0]],
            [0, 0, 0, 0, 1],
        )
        assert recall_at_k(data, 4) == 1.0

    def test_unnormalized_hit_count_nondecreasing_in_k(self):
        rng = np.random.default_rng(5)
        arr = rng.standard_normal((10, 4))
        labels = rng.integers(0, 3, size=10).tolist()
        labels[0] = labels[1]
        data = LabeledEmbeddings.from_features(Tensor(arr), labels)
        sims = data.embeddings.array @ data.embeddings.array.T
        prev = None
        for k in range(1, 10):
            hits = 0
            for q in range(10):
                ranked = sorted((i for i in range(10) if i != q),
                                key=lambda i: (-sims[q, i], i))
                hits += sum(1 for i in ranked[:k] if labels[i] == labels[q])
            if prev is not None:
                assert hits >= prev
            prev = hits

    def test_min_normalized_recall_can_decrease_in_k(self):
        # Known counterexample to monotonicity in k: with the min(k, positives)
        # normalization, a query whose first positive ranks 1st but whose
        # second ranks far down scores 1 at k=1 and only 1/2 at k=2.
        data = _embeddings(
            [[1, 0, 0], [1, 0.02, 0], [0.05, 0, 1], [1, -0.1, 0], [1, 0.05, 0.05]],
            [0, 0, 0, 1, 2],
        )
        values = {k: recall_at_k(data, k) for k in (1, 2)}
        assert values[2] < values[1]
        assert all(0.0 <= v <= 1.0 for v in values.values())


class TestKnn:
    def test_k1_most_similar(self):
        train = _embeddings([[1, 0], [0, 1]], [3, 7])
        assert knn_classify(train, Tensor([0.9, 0.1]), 1) == 3

    def test_query_equal_to_training_row(self):
        train = _embeddings([[1, 0], [0, 1], [-1, 0]], [0, 1, 2])
        assert knn_classify(train, Tensor([0.0, 1.0]), 1) == 1

    def test_vote_tie_broken_by_nearest(self):
        train = _embeddings([[1, 0], [0.95, 0.05], [0, 1], [0.05, 0.95]], [0, 0, 1, 1])
        # k=4: two votes each; nearest neighbor decides
        assert knn_classify(train, Tensor([1.0, 0.001]), 4) == 0
        assert knn_classify(train, Tensor([0.001, 1.0]), 4) == 1

    def test_scaling_invariance_after_normalization(self):
        rng = np.random.default_rng(8)
        raw = rng.standard_normal((12, 5))
        labels = rng.integers(0, 3, size=12).tolist()
        t1 = LabeledEmbeddings.from_features(Tensor(raw), labels)
        t2 = LabeledEmbeddings.from_features(Tensor(raw * 37.5), labels)
        q = rng.standard_normal(5)
        for k in (1, 3, 5):
            assert knn_classify(t1, Tensor(q), k) == knn_classify(t2, Tensor(q * 2.0), k)

    def test_gaussian_clusters_accuracy(self):
        rng = np.random.default_rng(11)
        centers = rng.standard_normal((3, 8))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        train_raw = np.repeat(centers, 30, axis=0) + 0.1 * rng.standard_normal((90, 8))
        train = LabeledEmbeddings.from_features(Tensor(train_raw), np.repeat(np.arange(3), 30))
        correct = 0
        for _ in range(100):
            c = int(rng.integers(3))
            q = centers[c] + 0.1 * rng.standard_normal(8)
            correct += int(knn_classify(train, Tensor(q), 5) == c)
        assert correct / 100 > 0.95

    def test_errors(self):
        train = _embeddings([[1, 0]], [0])
        with pytest.raises(ValueError):
            knn_classify(train, Tensor([1.0, 0.0]), 2)


class TestIoU:
    def test_identical(self):
        b = Box.axis(0, 0, 2, 1)
        assert iou_axis_aligned(b, b) == 1.0
        r = Box.rotated(0, 0, 2, 1, 0.7)
        assert iou_rotated(r, r) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        assert iou_axis_aligned(Box.axis(0, 0, 1, 1), Box.axis(5, 5, 6, 6)) == 0.0
        assert iou_rotated(Box.rotated(0, 0, 1, 1, 0.3), Box.rotated(9, 9, 1, 1, 1.0)) == 0.0

    def test_offset_unit_squares_one_third(self):
        a, b = Box.axis(0, 0, 1, 1), Box.axis(0.5, 0, 1.5, 1)
        assert iou_axis_aligned(a, b) == pytest.approx(1 / 3, abs=1e-12)
        assert iou_rotated(a, b) == pytest.approx(1 / 3, abs=1e-12)

    def test_rotation_zero_agrees_with_axis_aligned(self):
        rng = np.random.default_rng(21)
        for _ in range(1000):
            x0, y0 = rng.uniform(-2, 2, size=2)
            w, h = rng.uniform(0.1, 3, size=2)
            x1, y1 = rng.uniform(-2, 2, size=2)
            w1, h1 = rng.uniform(0.1, 3, size=2)
            a_axis = Box.axis(x0, y0, x0 + w, y0 + h)
            b_axis = Box.axis(x1, y1, x1 + w1, y1 + h1)
            a_rot = Box.rotated(x0 + w / 2, y0 + h / 2, w, h, 0.0)
            b_rot = Box.rotated(x1 + w1 / 2, y1 + h1 / 2, w1, h1, 0.0)
            assert iou_rotated(a_rot, b_rot) == pytest.approx(
                iou_axis_aligned(a_axis, b_axis), abs=1e-9
            )

    def test_square_vs_rotated_45_matches_monte_carlo(self):
        a = Box.axis(0, 0, 1, 1)
        b = Box.rotated(0.5, 0.5, 1, 1, math.pi / 4)
        mc = iou_monte_carlo(a, b, samples=10_000_000, seed=0)
        assert iou_rotated(a, b) == pytest.approx(mc, abs=1e-3)
        # analytic: intersection is a regular octagon, area 2*(sqrt(2)-1)
        inter = 2 * (math.sqrt(2) - 1)
        assert iou_rotated(a, b) == pytest.approx(inter / (2 - inter), abs=1e-12)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            a = Box.rotated(*rng.uniform(-1, 1, 2), *rng.uniform(0.2, 2, 2),
                            rng.uniform(0, np.pi))
            b = Box.rotated(*rng.uniform(-1, 1, 2), *rng.uniform(0.2, 2, 2),
                            rng.uniform(0, np.pi))
            v1, v2 = iou_rotated(a, b), iou_rotated(b, a)
            assert v1 == pytest.approx(v2, abs=1e-9)
            assert 0.0 <= v1 <= 1.0

    def test_one_iff_coincident(self):
        a = Box.rotated(0, 0, 1, 2, 0.5)
        almost = Box.rotated(0, 0.01, 1, 2, 0.5)
        assert iou_rotated(a, almost) < 1.0 - 1e-9

    def test_degenerate_zero_area(self):
        a = Box.rotated(0, 0, 0, 0, 0.0)
        assert iou_rotated(a, a) == 0.0

    def test_box_validation(self):
        with pytest.raises(ValueError):
            Box.axis(1, 0, 0, 1)
        with pytest.raises(ValueError):
            Box.rotated(0, 0, -1, 1, 0)


class TestLabeledEmbeddings:
    def test_requires_normalized_rows(self):
        with pytest.raises(ValueError):
            LabeledEmbeddings(Tensor([[1.0, 1.0]]), [0])

    def test_from_features_normalizes(self):
        le = LabeledEmbeddings.from_features(Tensor([[3.0, 4.0]]), [0])
        assert np.allclose(le.embeddings.array, [[0.6, 0.8]])

    def test_label_length_checked(self):
        with pytest.raises(ValueError):
            LabeledEmbeddings(Tensor([[1.0, 0.0]]), [0, 1])
