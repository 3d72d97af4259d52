"""Acceptance suite: every verifiable promise of the package, desk scale.

Each criterion is a self-contained seeded procedure returning a pass/fail
verdict plus the metric series it measured. The suite runner executes
criteria 1-10 twice and adds an eleventh verdict comparing the two passes
byte-for-byte, so full determinism is itself part of acceptance.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Optimizer, Tensor, grad_check, graph_meter
from .config import ExperimentConfig
from .data import gen_string_task, rng_stream
from .experiments import (
    registered_losses,
    run_gradcheck,
    run_ls_feds,
    train_esupcon,
    train_rsk,
    train_softmax_baseline,
)
from .learned import SurrogateNet, fit_surrogate_step, one_hot, surrogate_value
from .metrics import (
    Box,
    SymbolSeq,
    edit_distance,
    edit_distance_naive,
    iou_axis_aligned,
    iou_monte_carlo,
    iou_rotated,
)
from .rsk import SmoothParams, chunked_gradients, rsk_loss, similarity_matrix, simix_expand

__all__ = ["CriterionResult", "run_suite", "run_acceptance", "format_result"]


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    series: dict = field(default_factory=dict)

    def __post_init__(self):
        # numpy comparison results are not JSON-serializable bools
        self.passed = bool(self.passed)
        self.series = {k: [float(v) for v in vals] for k, vals in self.series.items()}


def format_result(r: CriterionResult) -> str:
    status = "PASS" if r.passed else "FAIL"
    return f"[{status}] criterion {r.number:2d} {r.name}: {r.detail}"


# -- shared batch construction ---------------------------------------------------


def _round_robin_pairings(n: int) -> list:
    """Perfect matchings of n players (n even), the circle method."""
    rest = list(range(1, n))
    rounds = []
    for r in range(n - 1):
        line = [0] + rest[r:] + rest[:r]
        rounds.append([(line[i], line[n - 1 - i]) for i in range(n // 2)])
    return rounds


def gap_enforced_embeddings(n: int, rng: np.random.Generator,
                            jitter: float = 0.05) -> np.ndarray:
    """Unit-norm embeddings whose similarity rows have well-separated entries.

    Each pair of samples gets a similarity level from an edge coloring of the
    complete graph, so every row sees every level exactly once; the leveled
    matrix is then shifted to be positive semi-definite with unit diagonal
    and factored. Row entries stay pairwise separated by about 1/(30) after
    the spectral normalization, far above the temperatures used with it.
    """
    if n % 2 != 0:
        raise ValueError("n must be even for the pairing construction")
    levels = np.arange(1.0, n)
    rng.shuffle(levels)
    target = np.zeros((n, n))
    for color, pairs in enumerate(_round_robin_pairings(n)):
        for i, j in pairs:
            v = levels[color] + jitter * (2.0 * rng.uniform() - 1.0)
            target[i, j] = target[j, i] = v
    shift = -np.linalg.eigvalsh(target)[0] + 1e-3
    gram = target / shift + np.eye(n)
    w, u = np.linalg.eigh(gram)
    emb = u * np.sqrt(np.clip(w, 0.0, None))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return emb


def min_similarity_row_gap(scores: np.ndarray) -> float:
    worst = np.inf
    for i in range(scores.shape[0]):
        row = np.sort(np.delete(scores[i], i))
        worst = min(worst, float(np.min(np.diff(row))))
    return worst


def exact_recall_from_scores(scores: np.ndarray, same_label: np.ndarray,
                             self_mask: np.ndarray, k: int) -> float:
    """Brute-force recall@k on a score matrix via repeated maximum selection.

    Kept free of sorting library calls on purpose: this is the independent
    oracle the smooth loss is checked against.
    """
    per_query = []
    q, m = same_label.shape
    for i in range(q):
        candidates = [c for c in range(m) if not self_mask[i, c]]
        positives = [c for c in candidates if same_label[i, c]]
        if not positives:
            continue
        remaining = list(candidates)
        top = []
        for _ in range(min(k, len(remaining))):
            best = remaining[0]
            for c in remaining[1:]:
                if scores[i, c] > scores[i, best]:
                    best = c
            top.append(best)
            remaining.remove(best)
        hits = sum(1 for c in top if same_label[i, c])
        per_query.append(hits / min(k, len(positives)))
    return float(np.mean(per_query))


# -- criteria ---------------------------------------------------------------------


def criterion_1_gradient_suite(seed: int) -> CriterionResult:
    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict({"kind": "gradcheck", "seed": seed})
    series = run_gradcheck(cfg)
    elapsed = time.perf_counter() - start
    worst = max(max(v) for v in series.values())
    passed = worst < 1e-4 and elapsed < 60.0
    out = {f"c1_{name}": vals for name, vals in series.items()}
    return CriterionResult(
        1, "gradient suite",
        passed,
        f"max relative error {worst:.2e} over {len(registered_losses())} losses x "
        f"{cfg.schedule.gradcheck_instances} instances in {elapsed:.1f}s "
        f"(need < 1e-4, < 60s)",
        out,
    )


def criterion_2_zero_temperature(seed: int) -> CriterionResult:
    tau = 0.001
    params = SmoothParams(tau1=tau, tau2=tau, k_set=(1, 2, 4, 8))
    labels = np.repeat([0, 1, 2], 4)
    rng = rng_stream(seed, "data")
    diffs = []
    min_gap = np.inf
    for _ in range(200):
        emb = gap_enforced_embeddings(12, rng)
        g = Graph()
        block = similarity_matrix(g, g.parameter(Tensor(emb)), labels)
        scores = block.score_values()
        gap = min_similarity_row_gap(scores)
        min_gap = min(min_gap, gap)
        if gap <= 10.0 * tau:
            raise AssertionError("gap construction failed to meet its precondition")
        smooth = g.value(rsk_loss(block, params)).item()
        exact = np.mean([
            exact_recall_from_scores(scores, block.same_label, block.self_mask, k)
            for k in params.k_set
        ])
        diffs.append(abs(smooth - (1.0 - exact)))
        g.release()
    worst = max(diffs)
    return CriterionResult(
        2, "zero-temperature oracle",
        worst < 1e-4,
        f"|smooth - exact| worst {worst:.2e} over 200 batches, "
        f"min row gap {min_gap:.3f} > {10 * tau} (need < 1e-4)",
        {"c2_abs_diff": diffs},
    )


def criterion_3_simix_equivalence(seed: int) -> CriterionResult:
    rng = rng_stream(seed, "simix")
    labels = np.repeat([0, 1, 2, 3], 2)
    worst = []
    for _ in range(100):
        emb = rng.standard_normal((8, 4))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        g = Graph()
        block = similarity_matrix(g, g.parameter(Tensor(emb)), labels)
        expanded = simix_expand(block, rng=rng, num_virtual=8)
        vals = expanded.score_values()
        err = 0.0
        for j, (u, v, lam) in enumerate(expanded.virtual):
            mixed = lam * emb[u] + (1.0 - lam) * emb[v]
            err = max(err, float(np.max(np.abs(vals[:, 8 + j] - emb @ mixed))))
        worst.append(err)
        g.release()
    return CriterionResult(
        3, "similarity-mixup equivalence",
        max(worst) < 1e-12,
        f"virtual columns vs explicit embedding mixup, worst {max(worst):.2e} "
        f"over 100 batches (need < 1e-12)",
        {"c3_max_abs_err": worst},
    )


def criterion_4_chunked_gradients(seed: int) -> CriterionResult:
    rng = rng_stream(seed, "data")
    params = SmoothParams(0.2, 0.2, (1, 2, 4))
    n = 32
    emb = rng.standard_normal((n, 6))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    labels = np.repeat(np.arange(8), 4)
    g = Graph()
    eid = g.parameter(Tensor(emb))
    mono = g.backward(rsk_loss(similarity_matrix(g, eid, labels), params))[eid].array
    g.release()
    diffs = []
    for chunk in (1, 2, 16, n):
        got = chunked_gradients(Tensor(emb), labels, params, chunk).array
        diffs.append(float(np.max(np.abs(got - mono))))

    emb64 = rng.standard_normal((64, 8))
    emb64 /= np.linalg.norm(emb64, axis=1, keepdims=True)
    labels64 = np.repeat(np.arange(16), 4)
    meter = graph_meter()
    meter.reset()
    g = Graph()
    eid = g.parameter(Tensor(emb64))
    g.backward(rsk_loss(similarity_matrix(g, eid, labels64), params))
    mono_peak = meter.peak_elements
    g.release()
    meter.reset()
    chunked_gradients(Tensor(emb64), labels64, params, 4)
    chunk_peak = meter.peak_elements
    ratio = chunk_peak / mono_peak
    passed = max(diffs) < 1e-9 and ratio < 1.0 / 8.0
    return CriterionResult(
        4, "chunked-gradient equivalence",
        passed,
        f"max |chunked - monolithic| {max(diffs):.2e} for chunks (1,2,16,{n}) "
        f"(need < 1e-9); peak live elements ratio {ratio:.3f} at chunk=4, n=64 "
        f"(need < 0.125)",
        {"c4_max_abs_diff": diffs, "c4_mem_ratio": [ratio]},
    )


def criterion_5_rsk_training(seed: int) -> CriterionResult:
    cfg = ExperimentConfig.from_dict({
        "kind": "rsk", "seed": seed,
        "loss": {"tau1": 0.2, "tau2": 0.2},
    })
    start = time.perf_counter()
    series = train_rsk(cfg, simix=False)
    elapsed = time.perf_counter() - start
    final = series["recall@1"][-1]
    passed = final > 0.9 and elapsed < 60.0 and cfg.schedule.steps <= 500
    return CriterionResult(
        5, "recall-surrogate training",
        passed,
        f"final exact recall@1 {final:.3f} after {cfg.schedule.steps} steps "
        f"in {elapsed:.1f}s (need > 0.9, <= 500 steps, < 60s)",
        {"c5_loss": series["loss"], "c5_recall@1": series["recall@1"]},
    )


def criterion_6_edit_distance_oracle(seed: int) -> CriterionResult:
    rng = rng_stream(seed, "data")
    disagreements = 0
    for _ in range(1000):
        la, lb = int(rng.integers(0, 7)), int(rng.integers(0, 7))
        a = SymbolSeq(tuple(int(x) for x in rng.integers(4, size=la)), 4)
        b = SymbolSeq(tuple(int(x) for x in rng.integers(4, size=lb)), 4)
        if edit_distance(a, b) != edit_distance_naive(a, b):
            disagreements += 1
    violations = 0
    for _ in range(1000):
        seqs = []
        for _ in range(3):
            ln = int(rng.integers(0, 11))
            seqs.append(SymbolSeq(tuple(int(x) for x in rng.integers(4, size=ln)), 4))
        x, y, z = seqs
        dxy, dyx = edit_distance(x, y), edit_distance(y, x)
        if dxy != dyx:
            violations += 1
        if (dxy == 0) != (x.symbols == y.symbols):
            violations += 1
        if dxy > edit_distance(x, z) + edit_distance(z, y):
            violations += 1
    passed = disagreements == 0 and violations == 0
    return CriterionResult(
        6, "edit-distance oracle",
        passed,
        f"{disagreements} DP-vs-naive disagreements on 1000 pairs, "
        f"{violations} metric-axiom violations on 1000 triples (need 0 and 0)",
        {"c6_disagreements": [float(disagreements)],
         "c6_axiom_violations": [float(violations)]},
    )


def criterion_7_iou_oracle(seed: int) -> CriterionResult:
    rng = rng_stream(seed, "data")
    diffs = []
    for i in range(50):
        a = Box.rotated(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)),
                        float(rng.uniform(0.4, 2.0)), float(rng.uniform(0.4, 2.0)),
                        float(rng.uniform(0, np.pi)))
        b = Box.rotated(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)),
                        float(rng.uniform(0.4, 2.0)), float(rng.uniform(0.4, 2.0)),
                        float(rng.uniform(0, np.pi)))
        exact = iou_rotated(a, b)
        sampled = iou_monte_carlo(a, b, samples=10_000_000, seed=seed * 100 + i)
        diffs.append(abs(exact - sampled))
    offset = abs(iou_axis_aligned(Box.axis(0, 0, 1, 1), Box.axis(0.5, 0, 1.5, 1)) - 1.0 / 3.0)
    offset = max(offset,
                 abs(iou_rotated(Box.axis(0, 0, 1, 1), Box.axis(0.5, 0, 1.5, 1)) - 1.0 / 3.0))
    passed = max(diffs) < 1e-3 and offset < 1e-12
    return CriterionResult(
        7, "IoU oracle",
        passed,
        f"clipping vs 1e7-sample Monte Carlo worst {max(diffs):.2e} on 50 "
        f"rotated pairs (need < 1e-3); offset-square case error {offset:.1e} "
        f"(need < 1e-12)",
        {"c7_abs_diff": diffs, "c7_offset_case_error": [offset]},
    )


def _mutated_pair(length: int, alphabet: int, rng: np.random.Generator):
    gt = tuple(int(x) for x in rng.integers(alphabet, size=length))
    sym = list(gt)
    for _ in range(int(rng.integers(0, length + 1))):
        kind = rng.integers(3)
        if kind == 0:
            sym[int(rng.integers(length))] = int(rng.integers(alphabet))
        elif kind == 1:
            sym = sym[1:] + [int(rng.integers(alphabet))]
        else:
            sym = [int(rng.integers(alphabet))] + sym[:-1]
    alpha = float(rng.uniform(0, 0.5))
    onehot = np.zeros((length, alphabet))
    onehot[np.arange(length), sym] = 1.0
    pred = (1.0 - alpha) * onehot + alpha / alphabet
    gt_seq = SymbolSeq(gt, alphabet)
    true = edit_distance(SymbolSeq(tuple(sym), alphabet), gt_seq)
    return Tensor(pred), one_hot(gt_seq), float(true)


def criterion_8_surrogate_quality(seed: int) -> CriterionResult:
    length, alphabet = 6, 8
    rng = rng_stream(seed, "data")
    train = [_mutated_pair(length, alphabet, rng) for _ in range(5000)]
    held = [_mutated_pair(length, alphabet, rng) for _ in range(1000)]
    net = SurrogateNet(length, alphabet, rng_stream(seed, "init"))
    opt = Optimizer.adam(1e-3)
    order = rng_stream(seed, "sampler")
    batch = 50
    for _ in range(6):
        perm = order.permutation(len(train))
        for i in range(0, len(train), batch):
            fit_surrogate_step(net, [train[j] for j in perm[i:i + batch]], opt)
    predicted = [surrogate_value(net, p, gt).item() for p, gt, _ in held]
    truth = [t for _, _, t in held]
    pearson = float(np.corrcoef(predicted, truth)[0, 1])
    return CriterionResult(
        8, "learned-surrogate quality",
        pearson > 0.8,
        f"held-out Pearson r {pearson:.3f} after fitting on 5000 triplets "
        f"(need > 0.8)",
        {"c8_pearson": [pearson]},
    )


def criterion_9_ls_feds(seed: int) -> CriterionResult:
    wins = 0
    base, ls_final, feds_final = [], [], []
    for offset in range(5):
        cfg = ExperimentConfig.from_dict({"kind": "ls", "seed": seed + offset})
        ls = run_ls_feds(cfg, use_feds=False)
        feds = run_ls_feds(ExperimentConfig.from_dict({"kind": "feds", "seed": seed + offset}),
                           use_feds=True)
        base.append(ls["val_ted"][0])
        ls_final.append(ls["val_ted"][-1])
        feds_final.append(feds["val_ted"][-1])
        wins += ls["val_ted"][-1] < ls["val_ted"][0]
    ls_mean, feds_mean = float(np.mean(ls_final)), float(np.mean(feds_final))
    passed = wins >= 4 and feds_mean <= ls_mean
    return CriterionResult(
        9, "surrogate post-tuning",
        passed,
        f"LS improves on {wins}/5 seeds (need >= 4); mean total edit distance "
        f"baseline {np.mean(base):.1f}, LS {ls_mean:.1f}, FEDS {feds_mean:.1f} "
        f"(need FEDS <= LS)",
        {"c9_baseline_ted": base, "c9_ls_ted": ls_final, "c9_feds_ted": feds_final},
    )


def criterion_10_esupcon(seed: int) -> CriterionResult:
    base = {
        "dataset": {"classes": 4, "per_class": 48, "dim": 8, "sigma": 0.25},
        "schedule": {"steps": 800, "eval_every": 100, "samples_per_class": 8},
    }
    cfg = ExperimentConfig.from_dict({"kind": "esupcon", "seed": seed, **base})
    _, clean_acc = train_esupcon(cfg)
    esup, ce = [], []
    for offset in range(5):
        corrupted = {**base, "schedule": {**base["schedule"], "label_corruption": 0.2}}
        ccfg = ExperimentConfig.from_dict({"kind": "esupcon", "seed": seed + offset,
                                           **corrupted})
        _, acc = train_esupcon(ccfg)
        esup.append(acc)
        ce.append(train_softmax_baseline(ccfg))
    esup_mean, ce_mean = float(np.mean(esup)), float(np.mean(ce))
    passed = clean_acc > 0.9 and esup_mean >= ce_mean
    return CriterionResult(
        10, "joint contrastive classification",
        passed,
        f"clean held-out accuracy {clean_acc:.3f} (need > 0.9); 20% corruption "
        f"mean accuracy {esup_mean:.3f} vs cross-entropy {ce_mean:.3f} "
        f"(need >= baseline)",
        {"c10_clean_acc": [clean_acc], "c10_corrupt_esupcon": esup,
         "c10_corrupt_ce": ce},
    )


_CRITERIA = (
    criterion_1_gradient_suite,
    criterion_2_zero_temperature,
    criterion_3_simix_equivalence,
    criterion_4_chunked_gradients,
    criterion_5_rsk_training,
    criterion_6_edit_distance_oracle,
    criterion_7_iou_oracle,
    criterion_8_surrogate_quality,
    criterion_9_ls_feds,
    criterion_10_esupcon,
)


def run_suite(seed: int = 0) -> list[CriterionResult]:
    """One pass over criteria 1-10."""
    return [fn(seed) for fn in _CRITERIA]


def _series_blob(results: list[CriterionResult]) -> bytes:
    merged = {}
    for r in results:
        merged.update(r.series)
    return json.dumps(merged, sort_keys=True).encode("utf-8")


def run_acceptance(seed: int = 0) -> tuple[list[CriterionResult], bytes]:
    """Two passes over criteria 1-10 plus the determinism criterion.

    Returns all eleven results and the canonical series bytes of the first
    pass (what reports persist).
    """
    first = run_suite(seed)
    second = run_suite(seed)
    blob_first, blob_second = _series_blob(first), _series_blob(second)
    identical = blob_first == blob_second
    results = list(first)
    results.append(CriterionResult(
        11, "determinism",
        identical,
        "two full suite passes produced byte-identical metric series"
        if identical else "metric series differ between passes",
        {"c11_identical": [1.0 if identical else 0.0]},
    ))
    return results, blob_first
