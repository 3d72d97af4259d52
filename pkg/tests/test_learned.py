import math

import numpy as np
import pytest

from metric_surrogates.autodiff import Graph, Optimizer, Tensor, grad_check
from metric_surrogates.data import gen_string_task
from metric_surrogates.learned import (
    RampFilter,
    SurrogateNet,
    TaskModel,
    alternate_train,
    decode_greedy,
    encode,
    feds_weight,
    fit_surrogate_step,
    one_hot,
    proxy_pretrain,
    surrogate_value,
    validation_total_edit_distance,
)
from metric_surrogates.metrics import SymbolSeq, edit_distance

L, A = 6, 8


def fresh_net(seed=0, **kw):
    return SurrogateNet(L, A, np.random.default_rng(seed), **kw)


def random_simplex(rng, rows=L, cols=A):
    x = np.abs(rng.standard_normal((rows, cols))) + 0.05
    return Tensor(x / x.sum(axis=1, keepdims=True))


class TestEncode:
    def test_deterministic(self):
        net = fresh_net()
        seq = one_hot(SymbolSeq((1, 2, 3, 4, 5, 0), A))
        assert np.array_equal(encode(net, seq).array, encode(net, seq).array)

    def test_one_hot_is_valid_input(self):
        out = encode(fresh_net(), one_hot(SymbolSeq((0,) * L, A)))
        assert out.shape == (16,)

    def test_rejects_non_simplex(self):
        with pytest.raises(ValueError):
            encode(fresh_net(), Tensor(np.full((L, A), 0.5)))

    def test_gradient_wrt_input(self):
        net = fresh_net(3)
        rng = np.random.default_rng(4)

        def f(g, x):
            bound = net.bind(g, trainable=False)
            enc = net.encode_batch(g, bound, x, batch=1)
            return g.mean(g.mul(enc, enc))

        assert grad_check(f, random_simplex(rng)) < 1e-4

    def test_position_sensitivity(self):
        # concatenation keeps positions distinct: swapping two symbols moves
        # the embedding
        net = fresh_net(5)
        a = encode(net, one_hot(SymbolSeq((1, 2, 0, 0, 0, 0), A)))
        b = encode(net, one_hot(SymbolSeq((2, 1, 0, 0, 0, 0), A)))
        assert not np.allclose(a.array, b.array)


class TestSurrogateValue:
    def test_identical_inputs_exactly_zero(self):
        net = fresh_net()
        oh = one_hot(SymbolSeq((3, 1, 4, 1, 5, 2), A))
        assert surrogate_value(net, oh, oh).item() == 0.0

    def test_symmetry_exact(self):
        net = fresh_net(1)
        rng = np.random.default_rng(2)
        a, b = random_simplex(rng), random_simplex(rng)
        assert surrogate_value(net, a, b).item() == surrogate_value(net, b, a).item()

    def test_non_negative(self):
        net = fresh_net(2)
        rng = np.random.default_rng(3)
        for _ in range(20):
            assert surrogate_value(net, random_simplex(rng), random_simplex(rng)).item() >= 0


class TestFitSurrogate:
    def test_zero_distance_identical_pairs_stationary(self):
        net = fresh_net(7)
        oh = one_hot(SymbolSeq((0, 1, 2, 3, 4, 5), A))
        opt = Optimizer.adam(1e-3)
        loss = fit_surrogate_step(net, [(oh, oh, 0.0)], opt)
        assert loss == 0.0
        # weights unchanged by a zero-gradient step up to adam's eps drift
        loss2 = fit_surrogate_step(net, [(oh, oh, 0.0)], opt)
        assert loss2 == 0.0

    def test_mse_matches_hand_computation(self):
        net = fresh_net(8)
        rng = np.random.default_rng(9)
        a, ga = random_simplex(rng), one_hot(SymbolSeq((1,) * L, A))
        b, gb = random_simplex(rng), one_hot(SymbolSeq((2,) * L, A))
        va = surrogate_value(net, a, ga).item()
        vb = surrogate_value(net, b, gb).item()
        expected = ((va - 3.0) ** 2 + (vb - 1.0) ** 2) / 2.0
        got = fit_surrogate_step(net, [(a, ga, 3.0), (b, gb, 1.0)], Optimizer.adam(1e-3))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_loss_trend_decreases(self):
        net = fresh_net(10)
        rng = np.random.default_rng(11)
        trips = []
        for _ in range(48):
            sa = SymbolSeq(tuple(rng.integers(A, size=L)), A)
            sb = SymbolSeq(tuple(rng.integers(A, size=L)), A)
            trips.append((one_hot(sa), one_hot(sb), float(edit_distance(sa, sb))))
        opt = Optimizer.adam(1e-3)
        first = fit_surrogate_step(net, trips, opt)
        for _ in range(200):
            last = fit_surrogate_step(net, trips, opt)
        assert last < first

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_surrogate_step(fresh_net(), [], Optimizer.adam(1e-3))


class TestDecodeGreedy:
    def test_one_hot_roundtrip(self):
        seq = SymbolSeq((4, 2, 7, 0, 3, 6), A)
        assert decode_greedy(one_hot(seq)).symbols == seq.symbols

    def test_uniform_ties_to_zero(self):
        assert decode_greedy(Tensor(np.full((3, 4), 0.25))).symbols == (0, 0, 0)

    def test_matches_per_row_loop(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            arr = rng.random((L, A))
            decoded = decode_greedy(Tensor(arr))
            for p in range(L):
                best = 0
                for a in range(1, A):
                    if arr[p, a] > arr[p, best]:
                        best = a
                assert decoded.symbols[p] == best


class TestRampFilter:
    def test_examples(self):
        filt = RampFilter(0.5, 1.5)
        assert feds_weight(filt, 0.0) == 1.0
        assert feds_weight(filt, 2.0) == 0.0
        assert feds_weight(filt, 1.0) == 0.5

    def test_monotone_continuous_bounded(self):
        filt = RampFilter(0.3, 1.1)
        xs = np.linspace(0, 2, 400)
        ws = [feds_weight(filt, float(x)) for x in xs]
        assert all(0.0 <= w <= 1.0 for w in ws)
        assert all(a >= b - 1e-12 for a, b in zip(ws, ws[1:]))
        # continuity at the knots
        eps = 1e-9
        assert feds_weight(filt, 0.3 + eps) == pytest.approx(1.0, abs=1e-6)
        assert feds_weight(filt, 1.1 - eps) == pytest.approx(0.0, abs=1e-6)

    def test_validation(self):
        with pytest.raises(ValueError):
            RampFilter(-0.1, 1.0)
        with pytest.raises(ValueError):
            RampFilter(1.0, 1.0)
        with pytest.raises(ValueError):
            feds_weight(RampFilter(0.5, 1.5), -1.0)

    def test_infinite_upper_gives_weight_one(self):
        filt = RampFilter(0.0, math.inf)
        assert feds_weight(filt, 1e12) == 1.0


def small_task(seed=0, n=40):
    data = gen_string_task(n, L, A, noise=0.5, seed_or_rng=seed)
    return data[:32], data[32:]


class TestAlternateTrain:
    def test_zero_rounds_only_initial_metric(self):
        train, val = small_task()
        rng = np.random.default_rng(1)
        model = TaskModel(A, A, rng)
        net = fresh_net(2)
        history = alternate_train(
            model, net, (train, val), (5, 5, 0),
            surrogate_opt=Optimizer.adam(1e-3), model_opt=Optimizer.adam(1e-3),
            rng=np.random.default_rng(3),
        )
        assert len(history["val_ted"]) == 1
        assert history["surrogate_loss"] == [] and history["model_loss"] == []

    def test_schedule_validation(self):
        train, val = small_task()
        model = TaskModel(A, A, np.random.default_rng(0))
        with pytest.raises(ValueError):
            alternate_train(model, fresh_net(), (train, val), (0, 5, 1),
                            surrogate_opt=Optimizer.adam(1e-3),
                            model_opt=Optimizer.adam(1e-3),
                            rng=np.random.default_rng(0))

    def test_feds_with_infinite_upper_bit_identical_to_ls(self):
        train, val = small_task(seed=5)

        def run(filt):
            rng = np.random.default_rng(77)
            model = TaskModel(A, A, rng)
            net = SurrogateNet(L, A, rng)
            proxy_pretrain(model, train, 20, Optimizer.adam(1e-2),
                           np.random.default_rng(78))
            history = alternate_train(
                model, net, (train, val), (4, 4, 3), feds=filt,
                surrogate_opt=Optimizer.adam(1e-3), model_opt=Optimizer.adam(1e-3),
                rng=np.random.default_rng(79),
            )
            return history, model.params["w"].array

        h_ls, w_ls = run(None)
        h_feds, w_feds = run(RampFilter(0.0, math.inf))
        assert h_ls == h_feds
        assert np.array_equal(w_ls, w_feds)

    def test_end_to_end_gradient_through_surrogate(self):
        rng = np.random.default_rng(21)
        net = fresh_net(22, char_dim=4, hidden=16, embed_dim=8)
        feats = rng.standard_normal((2 * L, A))
        gts = np.vstack([one_hot(SymbolSeq(tuple(rng.integers(A, size=L)), A)).array
                         for _ in range(2)])
        x0 = np.vstack([rng.standard_normal((A, A)) / 2.0, np.zeros((1, A))])

        def f(g, x):
            w = g.gather_rows(x, list(range(A)))
            b = g.matmul(g.constant(np.ones((2 * L, 1))), g.gather_rows(x, [A]))
            probs = g.softmax_rows(g.add(g.matmul(g.constant(feats), w), b))
            bound = net.bind(g, trainable=False)
            e_pred = net.encode_batch(g, bound, probs, 2)
            e_gt = net.encode_batch(g, bound, g.constant(gts), 2)
            diff = g.sub(e_pred, e_gt)
            sumsq = g.matmul(g.mul(diff, diff), g.constant(np.ones((8, 1))))
            return g.mean(g.exp(g.scale(g.log(sumsq), 0.5)))

        assert grad_check(f, Tensor(x0)) < 1e-4

    def test_proxy_pretrain_reduces_ted(self):
        train, val = small_task(seed=9, n=64)
        rng = np.random.default_rng(30)
        model = TaskModel(A, A, rng)
        before = validation_total_edit_distance(model, val, L)
        proxy_pretrain(model, train, 150, Optimizer.adam(1e-2), np.random.default_rng(31))
        after = validation_total_edit_distance(model, val, L)
        assert after < before
