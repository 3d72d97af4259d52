"""Learned deep-embedding surrogate of edit distance, with ramp filtering.

A small encoder maps relaxed symbol sequences (rows on the probability
simplex) to vectors such that the Euclidean distance between two encodings
regresses the true edit distance of the decoded sequences. The surrogate is
fitted jointly with a task model in alternating rounds; during the model
phase the surrogate's parameters are frozen and the model minimizes the
surrogate distance between its softmax outputs and the one-hot ground truth.
Optionally each sample's contribution is down-weighted by a ramp on the
surrogate's current approximation error, so samples the surrogate handles
poorly do not steer the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Optimizer, Tensor
from .metrics import SymbolSeq, edit_distance, total_edit_distance

__all__ = [
    "SurrogateNet",
    "TaskModel",
    "RampFilter",
    "encode",
    "surrogate_value",
    "fit_surrogate_step",
    "decode_greedy",
    "feds_weight",
    "alternate_train",
    "proxy_pretrain",
    "one_hot",
]


def one_hot(seq: SymbolSeq) -> Tensor:
    out = np.zeros((len(seq), seq.alphabet_size))
    out[np.arange(len(seq)), list(seq.symbols)] = 1.0
    return Tensor(out)


def decode_greedy(pred: Tensor) -> SymbolSeq:
    """Per-position argmax with ties going to the smallest symbol index."""
    arr = pred.array
    if arr.ndim != 2:
        raise ValueError(f"prediction must be 2-D, got {arr.shape}")
    return SymbolSeq(tuple(int(i) for i in arr.argmax(axis=1)), arr.shape[1])


@dataclass(frozen=True)
class RampFilter:
    """Piecewise-linear down-weighting of samples by surrogate error.

    Weight is 1 up to ``lower``, 0 from ``upper`` on, linear in between.
    ``upper`` may be infinite, which makes every weight exactly 1.
    """

    lower: float = 0.5
    upper: float = 1.5

    def __post_init__(self):
        if self.lower < 0:
            raise ValueError("lower must be non-negative")
        if not self.upper > self.lower:
            raise ValueError("upper must exceed lower")


def feds_weight(filt: RampFilter, approx_error: float) -> float:
    """Sample weight in [0, 1] for a given surrogate approximation error."""
    if approx_error < 0:
        raise ValueError("approx_error must be non-negative")
    if approx_error <= filt.lower:
        return 1.0
    if approx_error >= filt.upper:
        return 0.0
    return 1.0 - (approx_error - filt.lower) / (filt.upper - filt.lower)


class SurrogateNet:
    """Encoder from simplex-row sequences to R^m for metric regression.

    Per-position character embeddings are concatenated in position order and
    passed through a two-layer perceptron. Deterministic given its weights.
    """

    PARAM_NAMES = ("char", "w1", "b1", "w2", "b2")

    def __init__(self, length: int, alphabet: int, rng: np.random.Generator,
                 char_dim: int = 8, hidden: int = 64, embed_dim: int = 16):
        if length < 1 or alphabet < 2:
            raise ValueError("need length >= 1 and alphabet >= 2")
        self.length = length
        self.alphabet = alphabet
        self.char_dim = char_dim
        self.hidden = hidden
        self.embed_dim = embed_dim
        flat = length * char_dim
        self.params = {
            "char": Tensor(rng.standard_normal((alphabet, char_dim)) / math.sqrt(alphabet)),
            "w1": Tensor(rng.standard_normal((flat, hidden)) / math.sqrt(flat)),
            "b1": Tensor(np.zeros(hidden)),
            "w2": Tensor(rng.standard_normal((hidden, embed_dim)) / math.sqrt(hidden)),
            "b2": Tensor(np.zeros(embed_dim)),
        }
        # Placement matrices copy each position's embedding into its slice of
        # the concatenated vector, so flattening is expressible as matmuls.
        self._place = []
        for p in range(length):
            m = np.zeros((char_dim, flat))
            m[:, p * char_dim : (p + 1) * char_dim] = np.eye(char_dim)
            self._place.append(m)

    def param_list(self) -> list[Tensor]:
        return [self.params[n] for n in self.PARAM_NAMES]

    def set_params(self, tensors: list[Tensor]):
        for name, t in zip(self.PARAM_NAMES, tensors):
            if t.shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for parameter {name}")
            self.params[name] = t

    def bind(self, g: Graph, trainable: bool) -> dict[str, int]:
        make = g.parameter if trainable else g.constant
        return {name: make(self.params[name]) for name in self.PARAM_NAMES}

    def encode_batch(self, g: Graph, bound: dict[str, int], seqs: int, batch: int) -> int:
        """Encode ``batch`` stacked sequences, node shape (batch, embed_dim)."""
        emb = g.matmul(seqs, bound["char"])
        flat = None
        for p in range(self.length):
            rows = g.gather_rows(emb, (np.arange(batch) * self.length + p).tolist())
            placed = g.matmul(rows, g.constant(self._place[p]))
            flat = placed if flat is None else g.add(flat, placed)
        h = g.relu(g.add(g.matmul(flat, bound["w1"]), bound["b1"]))
        return g.add(g.matmul(h, bound["w2"]), bound["b2"])


def _check_simplex(arr: np.ndarray, length: int, alphabet: int):
    if arr.shape != (length, alphabet):
        raise ValueError(f"expected shape {(length, alphabet)}, got {arr.shape}")
    if np.any(arr < -1e-12) or np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("rows must lie on the probability simplex")


def encode(net: SurrogateNet, seq: Tensor) -> Tensor:
    """Embedding of one relaxed sequence; rows must lie on the simplex."""
    _check_simplex(seq.array, net.length, net.alphabet)
    g = Graph()
    bound = net.bind(g, trainable=False)
    out = net.encode_batch(g, bound, g.constant(seq), batch=1)
    val = Tensor(g.value(out).array[0])
    g.release()
    return val


def _row_distances(g: Graph, a: int, b: int) -> int:
    """Per-row Euclidean distances between two (B, m) nodes as a (B, 1) node.

    sqrt is composed as exp(log/2), which cannot take exactly-zero rows, so
    rows with zero squared distance are emitted as exact constants.
    """
    diff = g.sub(a, b)
    sumsq = g.matmul(g.mul(diff, diff), g.constant(np.ones((g.value(a).shape[1], 1))))
    vals = g.value(sumsq).array.reshape(-1)
    if np.all(vals > 0):
        return g.exp(g.scale(g.log(sumsq), 0.5))
    rows = []
    for r in range(len(vals)):
        if vals[r] > 0:
            rows.append(g.exp(g.scale(g.log(g.gather_rows(sumsq, [r])), 0.5)))
        else:
            rows.append(g.constant(np.zeros((1, 1))))
    return g.concat_rows(rows)


def surrogate_value(net: SurrogateNet, pred: Tensor, gt: Tensor) -> Tensor:
    """Euclidean distance between the encodings of two relaxed sequences."""
    _check_simplex(pred.array, net.length, net.alphabet)
    _check_simplex(gt.array, net.length, net.alphabet)
    g = Graph()
    bound = net.bind(g, trainable=False)
    both = g.constant(np.vstack([pred.array, gt.array]))
    enc = net.encode_batch(g, bound, both, batch=2)
    d = _row_distances(g, g.gather_rows(enc, [0]), g.gather_rows(enc, [1]))
    out = Tensor([g.value(d).array[0, 0]])
    g.release()
    return out


def fit_surrogate_step(net: SurrogateNet, triplets, opt: Optimizer) -> float:
    """One optimizer step of MSE regression onto true edit distances.

    Each triplet is ``(pred, gt, true_distance)`` with both sequences as
    simplex-row tensors. Returns the pre-step loss.
    """
    if not triplets:
        raise ValueError("fit_surrogate_step needs at least one triplet")
    batch = len(triplets)
    preds = np.vstack([t[0].array for t in triplets])
    gts = np.vstack([t[1].array for t in triplets])
    targets = np.array([[float(t[2])] for t in triplets])

    g = Graph()
    bound = net.bind(g, trainable=True)
    e_pred = net.encode_batch(g, bound, g.constant(preds), batch)
    e_gt = net.encode_batch(g, bound, g.constant(gts), batch)
    d = _row_distances(g, e_pred, e_gt)
    err = g.sub(d, g.constant(targets))
    loss = g.mean(g.mul(err, err))
    loss_value = g.value(loss).item()

    grads = g.backward(loss)
    ids = [bound[n] for n in net.PARAM_NAMES]
    net.set_params(opt.apply([g.value(i) for i in ids], [grads[i] for i in ids]))
    g.release()
    return loss_value


class TaskModel:
    """Per-position linear readout with softmax rows.

    Maps a (length, feat_dim) feature block to (length, alphabet) simplex
    rows; batches are stacked along the row axis.
    """

    PARAM_NAMES = ("w", "b")

    def __init__(self, feat_dim: int, alphabet: int, rng: np.random.Generator):
        self.feat_dim = feat_dim
        self.alphabet = alphabet
        self.params = {
            "w": Tensor(rng.standard_normal((feat_dim, alphabet)) / math.sqrt(feat_dim)),
            "b": Tensor(np.zeros(alphabet)),
        }

    def param_list(self) -> list[Tensor]:
        return [self.params[n] for n in self.PARAM_NAMES]

    def set_params(self, tensors: list[Tensor]):
        for name, t in zip(self.PARAM_NAMES, tensors):
            if t.shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for parameter {name}")
            self.params[name] = t

    def bind(self, g: Graph, trainable: bool) -> dict[str, int]:
        make = g.parameter if trainable else g.constant
        return {name: make(self.params[name]) for name in self.PARAM_NAMES}

    def probs_node(self, g: Graph, bound: dict[str, int], feats: int) -> int:
        return g.softmax_rows(g.add(g.matmul(feats, bound["w"]), bound["b"]))

    def predict(self, feats: Tensor) -> Tensor:
        g = Graph()
        bound = self.bind(g, trainable=False)
        out = Tensor(g.value(self.probs_node(g, bound, g.constant(feats))).array)
        g.release()
        return out


def _stack_features(samples) -> np.ndarray:
    return np.vstack([feats.array for feats, _ in samples])


def _batch_probs(model: TaskModel, samples) -> np.ndarray:
    g = Graph()
    bound = model.bind(g, trainable=False)
    probs = model.probs_node(g, bound, g.constant(_stack_features(samples)))
    out = g.value(probs).array.copy()
    g.release()
    return out


def validation_total_edit_distance(model: TaskModel, samples, length: int) -> int:
    """Total edit distance of greedy decodes against the ground truth."""
    probs = _batch_probs(model, samples)
    pairs = []
    for i, (_, gt) in enumerate(samples):
        pred = decode_greedy(Tensor(probs[i * length : (i + 1) * length]))
        pairs.append((pred, gt))
    return total_edit_distance(pairs)


def proxy_pretrain(model: TaskModel, train, steps: int, opt: Optimizer,
                   rng: np.random.Generator, batch_size: int = 16) -> list[float]:
    """Per-position cross-entropy pretraining; returns the loss trace."""
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(train), size=min(batch_size, len(train)), replace=False)
        batch = [train[i] for i in idx]
        g = Graph()
        bound = model.bind(g, trainable=True)
        probs = model.probs_node(g, bound, g.constant(_stack_features(batch)))
        mask = np.vstack([one_hot(gt).array for _, gt in batch])
        ce = g.scale(g.sum(g.mul(g.log(probs), g.constant(mask))), -1.0 / mask.shape[0])
        losses.append(g.value(ce).item())
        grads = g.backward(ce)
        ids = [bound[n] for n in model.PARAM_NAMES]
        model.set_params(opt.apply([g.value(i) for i in ids], [grads[i] for i in ids]))
        g.release()
    return losses


def model_length(samples) -> int:
    return samples[0][0].shape[0]


def alternate_train(model: TaskModel, net: SurrogateNet, data, schedule,
                    feds: RampFilter | None = None, *,
                    surrogate_opt: Optimizer, model_opt: Optimizer,
                    rng: np.random.Generator, batch_size: int = 16) -> dict:
    """Alternating surrogate-fit / model-tuning rounds.

    ``data`` is a ``(train, val)`` pair of ``(features, SymbolSeq)`` lists and
    ``schedule`` is ``(surrogate_steps, model_steps, rounds)``. Each round
    first fits the surrogate on fresh model outputs labeled with true edit
    distances, then tunes the model against the frozen surrogate, optionally
    weighting each sample by the ramp filter on the surrogate's current error.
    Returns a history dict with the per-round validation total edit distance,
    starting with the pre-tuning value.
    """
    s_steps, m_steps, rounds = (int(v) for v in schedule)
    if s_steps < 1 or m_steps < 1:
        raise ValueError("surrogate and model step counts must be >= 1")
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    train, val = data
    length = model_length(train)

    history = {
        "val_ted": [float(validation_total_edit_distance(model, val, length))],
        "surrogate_loss": [],
        "model_loss": [],
    }
    for _ in range(rounds):
        fit_losses = []
        for _ in range(s_steps):
            idx = rng.choice(len(train), size=min(batch_size, len(train)), replace=False)
            batch = [train[i] for i in idx]
            probs = _batch_probs(model, batch)
            triplets = []
            for i, (_, gt) in enumerate(batch):
                pred = Tensor(probs[i * length : (i + 1) * length])
                dist = edit_distance(decode_greedy(pred), gt)
                triplets.append((pred, one_hot(gt), float(dist)))
            fit_losses.append(fit_surrogate_step(net, triplets, surrogate_opt))
        history["surrogate_loss"].append(float(np.mean(fit_losses)))

        step_losses = []
        for _ in range(m_steps):
            idx = rng.choice(len(train), size=min(batch_size, len(train)), replace=False)
            batch = [train[i] for i in idx]
            b = len(batch)
            g = Graph()
            model_bound = model.bind(g, trainable=True)
            net_bound = net.bind(g, trainable=False)
            probs = model.probs_node(g, bound=model_bound, feats=g.constant(_stack_features(batch)))
            gts = np.vstack([one_hot(gt).array for _, gt in batch])
            e_pred = net.encode_batch(g, net_bound, probs, b)
            e_gt = net.encode_batch(g, net_bound, g.constant(gts), b)
            d = _row_distances(g, e_pred, e_gt)

            d_vals = g.value(d).array.reshape(-1)
            prob_vals = g.value(probs).array
            weights = np.ones((b, 1))
            for i, (_, gt) in enumerate(batch):
                pred = Tensor(prob_vals[i * length : (i + 1) * length])
                true_d = edit_distance(decode_greedy(pred), gt)
                w = 1.0 if feds is None else feds_weight(feds, abs(d_vals[i] - true_d))
                weights[i, 0] = w
            loss = g.scale(g.sum(g.mul(d, g.constant(weights))), 1.0 / b)
            step_losses.append(g.value(loss).item())
            grads = g.backward(loss)
            ids = [model_bound[n] for n in model.PARAM_NAMES]
            model.set_params(model_opt.apply([g.value(i) for i in ids],
                                             [grads[i] for i in ids]))
            g.release()
        history["model_loss"].append(float(np.mean(step_losses)))
        history["val_ted"].append(float(validation_total_edit_distance(model, val, length)))
    return history
