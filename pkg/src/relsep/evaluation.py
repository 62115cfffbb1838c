"""Downstream evaluation of frozen embeddings.

Every protocol here is deterministic given its seed: stratified label
splits, a logistic probe trained by full-batch gradient descent with a
small weight-decay grid, k-means clustering scored by NMI and ARI,
nearest-neighbor label agreement, and the two experiment drivers that
retrain the pipeline (edge-removal robustness and variant ablations).
All classification scores are percentages; AUC stays on [0, 1].
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .hetgraph import HeteroGraph, perturb_edges
from .trainer import TrainConfig, VARIANTS, train_pipeline

SPLIT_CHOICES = (20, 40, 60)
WEIGHT_DECAYS = (1e-4, 1e-3, 1e-2)
ABLATION_VARIANTS = VARIANTS + ("mean_fusion", "random_single")


class EvalError(ValueError):
    """Evaluation protocol misuse or degenerate inputs."""


@dataclass(frozen=True)
class SplitSpec:
    """Stratified train plus uniform validation/test index sets."""

    per_class_train: int = 20
    val_size: int = 1000
    test_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.per_class_train not in SPLIT_CHOICES:
            raise EvalError(f"per_class_train must be one of "
                            f"{SPLIT_CHOICES}, got {self.per_class_train}")
        if self.val_size < 1 or self.test_size < 1:
            raise EvalError("val_size and test_size must be positive")


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def make_splits(labels: np.ndarray, num_classes: int,
                spec: SplitSpec) -> Splits:
    """Per-class training draw, then uniform val/test from the rest.

    Deterministic per spec seed; the three sets are disjoint and sorted.
    """
    labels = np.asarray(labels)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([spec.seed])))
    train_parts = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size < spec.per_class_train:
            raise EvalError(
                f"class {c} has {idx.size} nodes, cannot draw "
                f"{spec.per_class_train} for training")
        train_parts.append(rng.permutation(idx)[:spec.per_class_train])
    train = np.sort(np.concatenate(train_parts))
    pool = np.setdiff1d(np.arange(labels.size), train)
    need = spec.val_size + spec.test_size
    if pool.size < need:
        raise EvalError(f"{pool.size} nodes left after the training draw, "
                        f"need {need} for validation and test")
    order = rng.permutation(pool)
    val = np.sort(order[:spec.val_size])
    test = np.sort(order[spec.val_size:need])
    return Splits(train, val, test)


def micro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Percent. For single-label multiclass this is plain accuracy."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return 100.0 * float(np.mean(y_true == y_pred))


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray,
             num_classes: int) -> float:
    """Percent. Unweighted mean of per-class F1; absent classes score 0."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    scores = []
    for c in range(num_classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return 100.0 * float(np.mean(scores))


def ovr_auc(y_true: np.ndarray, probabilities: np.ndarray) -> float:
    """One-vs-rest AUC from predicted class probabilities, averaged with
    equal weight over every class that has both positives and negatives.
    Rank-based with midrank tie handling.
    """
    y_true = np.asarray(y_true)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    aucs = []
    for c in range(probabilities.shape[1]):
        pos = y_true == c
        n_pos = int(pos.sum())
        n_neg = pos.size - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(probabilities[:, c])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                    / (n_pos * n_neg))
    if not aucs:
        raise EvalError("test labels are degenerate, AUC undefined")
    return float(np.mean(aucs))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _fit_probe(x: np.ndarray, y: np.ndarray, num_classes: int,
               weight_decay: float, steps: int, lr: float):
    n, d = x.shape
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    for _ in range(steps):
        p = _softmax(x @ w + b)
        err = (p - onehot) / n
        w -= lr * (x.T @ err + weight_decay * w)
        b -= lr * err.sum(axis=0)
    return w, b


def logistic_eval(embeddings: np.ndarray, labels: np.ndarray,
                  num_classes: int, splits: Splits, *, steps: int = 500,
                  lr: float = 0.5,
                  weight_decays=WEIGHT_DECAYS) -> tuple[float, float, float]:
    """(micro_f1, macro_f1, auc) of a multinomial logistic probe.

    Inputs are standardized on training statistics; the weight decay is
    chosen by validation micro-F1, first grid entry winning ties.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if np.unique(labels[splits.test]).size < 2:
        raise EvalError("test split contains a single class")
    mean = x[splits.train].mean(axis=0)
    std = x[splits.train].std(axis=0)
    x = (x - mean) / np.maximum(std, 1e-8)

    best = None
    for wd in weight_decays:
        w, b = _fit_probe(x[splits.train], labels[splits.train],
                          num_classes, wd, steps, lr)
        val_pred = np.argmax(x[splits.val] @ w + b, axis=1)
        score = micro_f1(labels[splits.val], val_pred)
        if best is None or score > best[0]:
            best = (score, w, b)
    _, w, b = best
    probs = _softmax(x[splits.test] @ w + b)
    pred = np.argmax(probs, axis=1)
    true = labels[splits.test]
    return (micro_f1(true, pred), macro_f1(true, pred, num_classes),
            ovr_auc(true, probs))


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def nmi(a: np.ndarray, b: np.ndarray) -> float:
    """Mutual information normalized by the arithmetic mean of the two
    label entropies. Two all-in-one-cluster partitions score 1."""
    table = _contingency(np.asarray(a), np.asarray(b))
    n = table.sum()
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = -np.sum(pa * np.log(pa, where=pa > 0, out=np.zeros_like(pa)))
    hb = -np.sum(pb * np.log(pb, where=pb > 0, out=np.zeros_like(pb)))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    pj = table / n
    outer = np.outer(pa, pb)
    mask = pj > 0
    mi = float(np.sum(pj[mask] * np.log(pj[mask] / outer[mask])))
    return float(np.clip(mi / ((ha + hb) / 2.0), 0.0, 1.0))


def ari(a: np.ndarray, b: np.ndarray) -> float:
    """Adjusted Rand index by pair counting; 1 when the denominator
    degenerates (both partitions trivial)."""
    table = _contingency(np.asarray(a), np.asarray(b))
    n = table.sum()

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / comb2(n)
    maximum = (sum_a + sum_b) / 2.0
    if maximum == expected:
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))


def _kmeans(x: np.ndarray, k: int, rng: np.random.Generator,
            max_iter: int = 300, rel_tol: float = 1e-4) -> np.ndarray:
    n = x.shape[0]
    sq = (x * x).sum(axis=1)

    def dist2(centers):
        d = sq[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(axis=1)
        return np.maximum(d, 0.0)

    # k-means++ seeding
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    closest = dist2(centers[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = x[int(rng.integers(n))]
        else:
            r = rng.random() * total
            centers[j] = x[int(np.searchsorted(np.cumsum(closest), r))]
        closest = np.minimum(closest, dist2(centers[j:j + 1]).ravel())

    prev_inertia = np.inf
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d = dist2(centers)
        assign = d.argmin(axis=1)
        inertia = float(d[np.arange(n), assign].sum())
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # Empty cluster: reseed at the point farthest from its center.
                centers[j] = x[int(d.min(axis=1).argmax())]
        if prev_inertia - inertia <= rel_tol * max(prev_inertia, 1e-12):
            break
        prev_inertia = inertia
    return assign


def kmeans_trials(embeddings: np.ndarray, labels: np.ndarray, k: int,
                  trials: int = 10,
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial (NMI, ARI) arrays over independently seeded k-means runs."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if k > np.unique(x, axis=0).shape[0]:
        raise EvalError(f"k={k} exceeds the number of distinct points")
    nmis, aris = [], []
    for t in range(trials):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, t])))
        assign = _kmeans(x, k, rng)
        nmis.append(nmi(labels, assign))
        aris.append(ari(labels, assign))
    return np.array(nmis), np.array(aris)


def kmeans_eval(embeddings: np.ndarray, labels: np.ndarray, k: int,
                trials: int = 10, seed: int = 0) -> tuple[float, float]:
    """Mean (NMI, ARI) over k-means trials."""
    nmis, aris = kmeans_trials(embeddings, labels, k, trials, seed)
    return float(nmis.mean()), float(aris.mean())


def sim_at_k(embeddings: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Mean percentage of each node's k nearest cosine neighbors (self
    excluded) that carry the node's own label."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    if not 1 <= k < n:
        raise EvalError(f"k must lie in [1, {n - 1}], got {k}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = x / np.maximum(norms, 1e-12)
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    agree = labels[nearest] == labels[:, None]
    return 100.0 * float(agree.mean())


@dataclass
class MetricsReport:
    """Named (mean, std) pairs plus enough metadata to reproduce them."""

    metrics: dict[str, tuple[float, float]] = field(default_factory=dict)
    dataset: str = ""
    split: int = 20
    config_hash: str = ""
    trials: int = 0

    def mean(self, name: str) -> float:
        return self.metrics[name][0]


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(config.to_json().encode()).hexdigest()[:12]


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def classification_report(embeddings: np.ndarray, labels: np.ndarray,
                          num_classes: int, spec: SplitSpec,
                          trials: int = 10, **metadata) -> MetricsReport:
    """Micro/Macro-F1 and AUC means over independently drawn splits."""
    if trials < 1:
        raise EvalError("trials must be positive")
    rows = []
    for t in range(trials):
        splits = make_splits(labels, num_classes,
                             replace(spec, seed=spec.seed + t))
        rows.append(logistic_eval(embeddings, labels, num_classes, splits))
    rows = np.asarray(rows)
    report = MetricsReport(split=spec.per_class_train, trials=trials,
                           **metadata)
    for j, name in enumerate(("micro_f1", "macro_f1", "auc")):
        report.metrics[name] = _mean_std(rows[:, j])
    return report


def evaluate_embeddings(embeddings: np.ndarray, labels: np.ndarray,
                        num_classes: int, spec: SplitSpec, *,
                        trials: int = 10, sim_ks=(5, 10),
                        **metadata) -> MetricsReport:
    """Full protocol: classification over split redraws, k-means over
    reseeded runs, and similarity search (deterministic, std 0)."""
    report = classification_report(embeddings, labels, num_classes, spec,
                                   trials, **metadata)
    nmis, aris = kmeans_trials(embeddings, labels, num_classes, trials,
                               spec.seed)
    report.metrics["nmi"] = _mean_std(nmis)
    report.metrics["ari"] = _mean_std(aris)
    for k in sim_ks:
        report.metrics[f"sim@{k}"] = (sim_at_k(embeddings, labels, k), 0.0)
    return report


def robustness_sweep(graph: HeteroGraph, config: TrainConfig, rates,
                     spec: SplitSpec, *, trials: int = 1,
                     perturb_seed: int = 0) -> list[tuple[float, MetricsReport]]:
    """Retrain on edge-dropped copies of the graph, one point per rate.

    Rate 0 reuses the graph untouched, so with a fixed config seed it
    reproduces the unperturbed result exactly.
    """
    points = []
    for rate in rates:
        if not 0.0 <= rate < 1.0:
            raise EvalError(f"removal rate must lie in [0, 1), got {rate}")
        g = graph if rate == 0.0 else perturb_edges(graph, rate, perturb_seed)
        pipeline, _ = train_pipeline(g, config)
        emb = pipeline.export_embeddings()
        report = classification_report(
            emb, g.labels, g.num_classes, spec, trials,
            dataset="", config_hash=config_hash(config))
        points.append((float(rate), report))
    return points


def _variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    if variant in VARIANTS:
        return config.with_variant(variant)
    if variant in ("mean_fusion", "random_single"):
        return replace(config, variant="full", loss_mode=variant)
    raise EvalError(f"unknown ablation variant {variant!r}; choose from "
                    f"{ABLATION_VARIANTS}")


def ablation_study(graph: HeteroGraph, config: TrainConfig, variants,
                   spec: SplitSpec, *,
                   trials: int = 1) -> list[tuple[str, MetricsReport]]:
    """Train each variant under one seed and score its embeddings."""
    rows = []
    for variant in variants:
        cfg = _variant_config(config, variant)
        pipeline, _ = train_pipeline(graph, cfg)
        emb = pipeline.export_embeddings()
        rows.append((variant, classification_report(
            emb, graph.labels, graph.num_classes, spec, trials,
            config_hash=config_hash(cfg))))
    return rows
