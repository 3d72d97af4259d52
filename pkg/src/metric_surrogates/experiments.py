"""Experiment pipelines behind the CLI: training loops, gradient suite, oracles.

Each pipeline is deterministic given the config seed: a single seed is split
into named streams (data, init, sampler, simix) so that toggling one feature
never perturbs the draws of another.
"""

from __future__ import annotations

import time

import numpy as np

from . import __version__
from .autodiff import DomainError, Graph, Optimizer, ShapeMismatch, Tensor, grad_check
from .config import ExperimentConfig, NumericAbort, RunReport, report_io
from .data import gen_gaussian_classes, gen_string_task, rng_stream
from .esupcon import ClassifierPrototypes, esupcon_loss, predict_proba, supcon_loss
from .learned import (
    RampFilter,
    SurrogateNet,
    TaskModel,
    alternate_train,
    decode_greedy,
    one_hot,
    proxy_pretrain,
    validation_total_edit_distance,
)
from .metrics import (
    Box,
    LabeledEmbeddings,
    SymbolSeq,
    edit_distance,
    edit_distance_naive,
    iou_monte_carlo,
    iou_rotated,
    recall_at_k,
)
from .rsk import BatchPlan, SimilarityBlock, SmoothParams, rsk_loss, sample_batch, similarity_matrix, simix_expand

__all__ = [
    "run",
    "train_rsk",
    "train_esupcon",
    "train_softmax_baseline",
    "run_ls_feds",
    "run_gradcheck",
    "run_oracle_suite",
    "registered_losses",
    "make_optimizer",
]

_NUMERIC_ERRORS = (DomainError, ShapeMismatch, FloatingPointError, OverflowError,
                   ZeroDivisionError)


def make_optimizer(cfg: ExperimentConfig) -> Optimizer:
    o = cfg.optimizer
    if o.kind == "sgd":
        return Optimizer.sgd(o.lr)
    return Optimizer.adam(o.lr, o.beta1, o.beta2, o.eps)


class _TwoLayerEmbedder:
    """Feature-to-embedding MLP used by the retrieval experiments."""

    PARAM_NAMES = ("w1", "b1", "w2", "b2")

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.params = {
            "w1": Tensor(rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim)),
            "b1": Tensor(np.zeros(hidden)),
            "w2": Tensor(rng.standard_normal((hidden, out_dim)) / np.sqrt(hidden)),
            "b2": Tensor(np.zeros(out_dim)),
        }

    def bind(self, g: Graph, trainable: bool) -> dict[str, int]:
        make = g.parameter if trainable else g.constant
        return {n: make(self.params[n]) for n in self.PARAM_NAMES}

    def set_params(self, tensors):
        for n, t in zip(self.PARAM_NAMES, tensors):
            self.params[n] = t

    def embed_node(self, g: Graph, bound: dict[str, int], feats: int) -> int:
        h = g.relu(g.add(g.matmul(feats, bound["w1"]), bound["b1"]))
        return g.l2_normalize_rows(g.add(g.matmul(h, bound["w2"]), bound["b2"]))

    def embed_all(self, feats: Tensor) -> Tensor:
        g = Graph()
        out = Tensor(g.value(self.embed_node(g, self.bind(g, False), g.constant(feats))).array)
        g.release()
        return out


def train_rsk(cfg: ExperimentConfig, simix: bool) -> dict:
    """Train an embedder with the recall surrogate; evaluates exact recall@k."""
    d, s, l = cfg.dataset, cfg.schedule, cfg.loss
    feats, labels = gen_gaussian_classes(d.classes, d.per_class, d.dim, d.sigma,
                                         rng_stream(cfg.seed, "data"))
    model = _TwoLayerEmbedder(d.dim, s.hidden, d.dim, rng_stream(cfg.seed, "init"))
    params = SmoothParams(l.tau1, l.tau2, tuple(l.k_set))
    plan = BatchPlan.default(d.classes, s.samples_per_class, s.batch_cap)
    sampler = rng_stream(cfg.seed, "sampler")
    simix_rng = rng_stream(cfg.seed, "simix")
    opt = make_optimizer(cfg)

    series: dict[str, list[float]] = {"loss": []}
    for k in params.k_set:
        series[f"recall@{k}"] = []

    def evaluate(loss_value: float):
        emb = model.embed_all(feats)
        data = LabeledEmbeddings(emb, list(labels))
        series["loss"].append(float(loss_value))
        for k in params.k_set:
            series[f"recall@{k}"].append(recall_at_k(data, min(k, data.n - 1)))

    feat_arr = feats.array
    for step_idx in range(s.steps):
        try:
            idx = sample_batch(labels, plan, sampler)
            g = Graph()
            bound = model.bind(g, trainable=True)
            emb = model.embed_node(g, bound, g.constant(Tensor(feat_arr[idx])))
            block = similarity_matrix(g, emb, labels[idx])
            if simix:
                block = simix_expand(block, rng=simix_rng,
                                     num_virtual=l.virtual_per_batch or len(idx))
            loss = rsk_loss(block, params)
            loss_value = g.value(loss).item()
            grads = g.backward(loss)
            ids = [bound[n] for n in model.PARAM_NAMES]
            model.set_params(opt.apply([g.value(i) for i in ids], [grads[i] for i in ids]))
            g.release()
        except _NUMERIC_ERRORS as exc:
            raise NumericAbort(step_idx, exc) from exc
        if (step_idx + 1) % s.eval_every == 0 or step_idx == s.steps - 1:
            evaluate(loss_value)
    return series


def _split_per_class(labels: np.ndarray, val_fraction: float):
    train_idx, val_idx = [], []
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        n_val = max(1, int(round(len(members) * val_fraction)))
        val_idx.extend(members[-n_val:])
        train_idx.extend(members[:-n_val])
    return np.array(train_idx), np.array(val_idx)


def _corrupted_labels(labels: np.ndarray, idx: np.ndarray, fraction: float,
                      classes: int, rng: np.random.Generator) -> np.ndarray:
    out = labels[idx].copy()
    if fraction <= 0:
        return out
    n_flip = int(round(fraction * len(idx)))
    flip = rng.choice(len(idx), size=n_flip, replace=False)
    for i in flip:
        others = [c for c in range(classes) if c != out[i]]
        out[i] = others[int(rng.integers(len(others)))]
    return out


def _raw_embedder_output(model: "_TwoLayerEmbedder", feats: np.ndarray) -> np.ndarray:
    g = Graph()
    bound = model.bind(g, trainable=False)
    h = g.relu(g.add(g.matmul(g.constant(Tensor(feats)), bound["w1"]), bound["b1"]))
    out = g.value(g.add(g.matmul(h, bound["w2"]), bound["b2"])).array.copy()
    g.release()
    return out


def train_esupcon(cfg: ExperimentConfig) -> tuple[dict, float]:
    """Joint contrastive training of embedder and prototypes.

    Prototypes start at the normalized class means of the initial embeddings
    and move on their own (slower) optimizer, re-projected onto the sphere
    after every step. Returns the metric series and the final held-out
    accuracy of the prototype classifier.
    """
    d, s, l = cfg.dataset, cfg.schedule, cfg.loss
    feats, labels = gen_gaussian_classes(d.classes, d.per_class, d.dim, d.sigma,
                                         rng_stream(cfg.seed, "data"))
    train_idx, val_idx = _split_per_class(labels, d.val_fraction)
    model = _TwoLayerEmbedder(d.dim, s.hidden, d.dim, rng_stream(cfg.seed, "init"))
    sampler = rng_stream(cfg.seed, "sampler")
    train_labels = _corrupted_labels(labels, train_idx, s.label_corruption,
                                     d.classes, sampler)

    emb0 = _raw_embedder_output(model, feats.array[train_idx])
    emb0 /= np.linalg.norm(emb0, axis=1, keepdims=True)
    means = np.vstack([emb0[train_labels == c].mean(axis=0) for c in range(d.classes)])
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    protos = ClassifierPrototypes(Tensor(means), l.tau_contrastive)

    opt = make_optimizer(cfg)
    proto_opt = Optimizer.adam(cfg.optimizer.proto_lr)
    per_class = min(s.samples_per_class, int(np.min(np.bincount(train_labels))))
    plan = BatchPlan(d.classes, max(2, per_class), d.classes * max(2, per_class))
    train_feats = feats.array[train_idx]
    series: dict[str, list[float]] = {"loss": [], "val_acc": []}

    def val_accuracy() -> float:
        emb = model.embed_all(Tensor(feats.array[val_idx]))
        correct = 0
        for row, lab in zip(emb.array, labels[val_idx]):
            proba = predict_proba(Tensor(row), protos)
            correct += int(np.argmax(proba.array) == lab)
        return correct / len(val_idx)

    for step_idx in range(s.steps):
        try:
            idx = sample_batch(train_labels, plan, sampler)
            g = Graph()
            bound = model.bind(g, trainable=True)
            emb = model.embed_node(g, bound, g.constant(Tensor(train_feats[idx])))
            w = g.parameter(protos.weights)
            loss = esupcon_loss(g, emb, train_labels[idx], w, l.tau_contrastive)
            loss_value = g.value(loss).item()
            grads = g.backward(loss)
            ids = [bound[n] for n in model.PARAM_NAMES]
            model.set_params(opt.apply([g.value(i) for i in ids], [grads[i] for i in ids]))
            protos = ClassifierPrototypes.renormalized(
                proto_opt.apply([g.value(w)], [grads[w]])[0], l.tau_contrastive
            )
            g.release()
        except _NUMERIC_ERRORS as exc:
            raise NumericAbort(step_idx, exc) from exc
        if (step_idx + 1) % s.eval_every == 0 or step_idx == s.steps - 1:
            series["loss"].append(float(loss_value))
            series["val_acc"].append(val_accuracy())
    return series, series["val_acc"][-1]


def train_softmax_baseline(cfg: ExperimentConfig) -> float:
    """Same embedder with a linear head trained by plain cross-entropy."""
    d, s = cfg.dataset, cfg.schedule
    feats, labels = gen_gaussian_classes(d.classes, d.per_class, d.dim, d.sigma,
                                         rng_stream(cfg.seed, "data"))
    train_idx, val_idx = _split_per_class(labels, d.val_fraction)
    init_rng = rng_stream(cfg.seed, "init")
    model = _TwoLayerEmbedder(d.dim, s.hidden, d.dim, init_rng)
    head = Tensor(init_rng.standard_normal((d.dim, d.classes)) / np.sqrt(d.dim))
    train_labels = _corrupted_labels(labels, train_idx, s.label_corruption,
                                     d.classes, rng_stream(cfg.seed, "sampler"))

    opt = make_optimizer(cfg)
    train_feats = feats.array[train_idx]
    onehot = np.zeros((len(train_idx), d.classes))
    onehot[np.arange(len(train_idx)), train_labels] = 1.0

    for step_idx in range(s.steps):
        try:
            g = Graph()
            bound = model.bind(g, trainable=True)
            h = g.relu(g.add(g.matmul(g.constant(Tensor(train_feats)), bound["w1"]),
                             bound["b1"]))
            emb = g.add(g.matmul(h, bound["w2"]), bound["b2"])
            wh = g.parameter(head)
            probs = g.softmax_rows(g.matmul(emb, wh))
            ce = g.scale(g.sum(g.mul(g.log(probs), g.constant(onehot))),
                         -1.0 / len(train_idx))
            grads = g.backward(ce)
            ids = [bound[n] for n in model.PARAM_NAMES] + [wh]
            new = opt.apply([g.value(i) for i in ids], [grads[i] for i in ids])
            model.set_params(new[:-1])
            head = new[-1]
            g.release()
        except _NUMERIC_ERRORS as exc:
            raise NumericAbort(step_idx, exc) from exc

    logits = _raw_embedder_output(model, feats.array[val_idx]) @ head.array
    return float(np.mean(np.argmax(logits, axis=1) == labels[val_idx]))


def run_ls_feds(cfg: ExperimentConfig, use_feds: bool) -> dict:
    """Proxy pretraining followed by alternating surrogate post-tuning."""
    d, s, l = cfg.dataset, cfg.schedule, cfg.loss
    data = gen_string_task(d.strings, d.length, d.alphabet, d.noise,
                           rng_stream(cfg.seed, "data"))
    n_val = max(1, int(round(d.strings * d.val_fraction)))
    train, val = data[:-n_val], data[-n_val:]

    init_rng = rng_stream(cfg.seed, "init")
    model = TaskModel(d.alphabet, d.alphabet, init_rng)
    net = SurrogateNet(d.length, d.alphabet, init_rng)
    sampler = rng_stream(cfg.seed, "sampler")

    try:
        proxy_pretrain(model, train, s.proxy_steps, make_optimizer(cfg), sampler,
                       s.batch_size)
        filt = RampFilter(l.ramp_lower, l.ramp_upper) if use_feds else None
        history = alternate_train(
            model, net, (train, val), (s.surrogate_steps, s.model_steps, s.rounds),
            feds=filt,
            surrogate_opt=Optimizer.adam(1e-3),
            model_opt=Optimizer.adam(cfg.optimizer.post_lr),
            rng=sampler,
            batch_size=s.batch_size,
        )
    except _NUMERIC_ERRORS as exc:
        raise NumericAbort(0, exc) from exc
    # Epoch 0 is the post-proxy, pre-tuning state; phase losses have no value there.
    return {
        "val_ted": history["val_ted"],
        "surrogate_loss": [0.0] + history["surrogate_loss"],
        "model_loss": [0.0] + history["model_loss"],
    }


def registered_losses() -> tuple:
    """Losses covered by the gradient suite, with their check builders."""
    return ("rsk_tau2_0.05", "supcon", "esupcon", "surrogate_pipeline")


def _gradcheck_one(name: str, seed: int) -> float:
    rng = np.random.default_rng([seed, 17])
    if name == "rsk_tau2_0.05":
        labels = np.repeat(np.arange(4), 2)
        centers = rng.standard_normal((4, 4))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        x = Tensor(np.repeat(centers, 2, axis=0) + 0.5 * rng.standard_normal((8, 4)))
        params = SmoothParams(1.0, 0.05, (1, 2, 4))

        def f(g, xid):
            return rsk_loss(similarity_matrix(g, g.l2_normalize_rows(xid), labels), params)

        return grad_check(f, x)
    if name == "supcon":
        labels = np.repeat(np.arange(3), 2)
        x = Tensor(rng.standard_normal((6, 4)))

        def f(g, xid):
            return supcon_loss(g, g.l2_normalize_rows(xid), labels, 0.1)

        return grad_check(f, x)
    if name == "esupcon":
        labels = np.repeat(np.arange(3), 2)
        # Embeddings and prototypes are packed into one matrix so the check
        # covers the gradients of both.
        x = Tensor(rng.standard_normal((9, 4)))

        def f(g, xid):
            z = g.l2_normalize_rows(g.gather_rows(xid, list(range(6))))
            w = g.l2_normalize_rows(g.gather_rows(xid, [6, 7, 8]))
            return esupcon_loss(g, z, labels, w, 0.1)

        return grad_check(f, x)
    if name == "surrogate_pipeline":
        length, alphabet = 4, 5
        net = SurrogateNet(length, alphabet, rng, char_dim=4, hidden=16, embed_dim=8)
        batch = 3
        feats = rng.standard_normal((batch * length, alphabet))
        gts = np.zeros((batch * length, alphabet))
        gts[np.arange(batch * length), rng.integers(alphabet, size=batch * length)] = 1.0
        x = Tensor(np.vstack([rng.standard_normal((alphabet, alphabet)) / 2.0,
                              np.zeros((1, alphabet))]))

        def f(g, xid):
            w = g.gather_rows(xid, list(range(alphabet)))
            b = g.matmul(g.constant(np.ones((batch * length, 1))),
                         g.gather_rows(xid, [alphabet]))
            probs = g.softmax_rows(g.add(g.matmul(g.constant(feats), w), b))
            bound = net.bind(g, trainable=False)
            e_pred = net.encode_batch(g, bound, probs, batch)
            e_gt = net.encode_batch(g, bound, g.constant(gts), batch)
            diff = g.sub(e_pred, e_gt)
            sumsq = g.matmul(g.mul(diff, diff), g.constant(np.ones((net.embed_dim, 1))))
            return g.mean(g.exp(g.scale(g.log(sumsq), 0.5)))

        return grad_check(f, x)
    raise ValueError(f"unknown registered loss {name!r}")


def run_gradcheck(cfg: ExperimentConfig) -> dict:
    """Max relative finite-difference error per registered loss, per instance."""
    series: dict[str, list[float]] = {}
    for name in registered_losses():
        errs = []
        for i in range(cfg.schedule.gradcheck_instances):
            errs.append(float(_gradcheck_one(name, cfg.seed * 1000 + i)))
        series[name] = errs
    return series


def _random_rotated_box(rng: np.random.Generator) -> Box:
    return Box.rotated(
        cx=float(rng.uniform(-1, 1)),
        cy=float(rng.uniform(-1, 1)),
        width=float(rng.uniform(0.4, 2.0)),
        height=float(rng.uniform(0.4, 2.0)),
        angle=float(rng.uniform(0, np.pi)),
    )


def run_oracle_suite(cfg: ExperimentConfig) -> dict:
    """Cross-checks the DP edit distance and the clipping IoU against oracles."""
    s = cfg.schedule
    rng = rng_stream(cfg.seed, "data")
    edit_bad = 0
    for _ in range(s.oracle_pairs):
        la, lb = int(rng.integers(0, 7)), int(rng.integers(0, 7))
        a = SymbolSeq(tuple(int(x) for x in rng.integers(4, size=la)), 4)
        b = SymbolSeq(tuple(int(x) for x in rng.integers(4, size=lb)), 4)
        if edit_distance(a, b) != edit_distance_naive(a, b):
            edit_bad += 1
    iou_worst = 0.0
    for i in range(8):
        a, b = _random_rotated_box(rng), _random_rotated_box(rng)
        exact = iou_rotated(a, b)
        sampled = iou_monte_carlo(a, b, samples=s.mc_samples, seed=cfg.seed + i)
        iou_worst = max(iou_worst, abs(exact - sampled))
    return {
        "edit_disagreements": [float(edit_bad)],
        "iou_max_abs_diff": [float(iou_worst)],
    }


def run(cfg: ExperimentConfig) -> RunReport:
    """Validate, dispatch, time, and optionally persist one experiment."""
    cfg.validate()
    start = time.perf_counter()
    if cfg.kind == "rsk":
        series = train_rsk(cfg, simix=False)
    elif cfg.kind == "rsk-simix":
        series = train_rsk(cfg, simix=True)
    elif cfg.kind == "ls":
        series = run_ls_feds(cfg, use_feds=False)
    elif cfg.kind == "feds":
        series = run_ls_feds(cfg, use_feds=True)
    elif cfg.kind == "esupcon":
        series, _ = train_esupcon(cfg)
    elif cfg.kind == "gradcheck":
        series = run_gradcheck(cfg)
    elif cfg.kind == "oracle-suite":
        series = run_oracle_suite(cfg)
    else:  # unreachable after validate()
        raise AssertionError(cfg.kind)
    report = RunReport(
        config=cfg.to_dict(),
        series=series,
        wall_clock_s=time.perf_counter() - start,
        version=__version__,
        seed=cfg.seed,
    )
    if cfg.out:
        report_io(report, cfg.out)
    return report
