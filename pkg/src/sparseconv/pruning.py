"""Evolutionary pruning with retraining.

A pool of candidate subnetworks (per-layer sparsity vectors plus weight
snapshots) is evolved: each iteration trains one candidate for a few batches
with gradient-masked SGD, recomputes the binary masks from an importance
score mixing |weight| and a gradient statistic, and either keeps the progress
(raising the pruned fraction of the trained layers) or rewinds to the
pre-iteration snapshot and applies mutation or crossover. Stagnation is
broken by clustering the pool and keeping one representative per cluster.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._cluster import kmeans
from .datasets import split_train_val
from .errors import ShapeError, TrainingError
from .toynet import ToyNet, train_batches

log = logging.getLogger(__name__)


@dataclass
class PruneConfig:
    acc_threshold: float = 0.002
    iter_nr: int = 60
    batch_nr: int = 20
    pool_size: int = 6
    initial_sparsity_range: tuple[float, float] = (0.4, 0.7)
    mask_increment: float = 0.05
    seed: int = 0
    target_sparsity: float | None = None
    lr: float = 0.05
    batch_size: int = 32
    val_fraction: float = 0.2
    stagnation_window: int = 10
    max_sparsity: float = 0.99
    fitness_sparsity_weight: float = 0.15
    alpha_gain: float = 1.0
    alpha_min: float = 0.05
    alpha_max: float = 0.9
    ema_decay: float = 0.9

    def __post_init__(self):
        lo, hi = self.initial_sparsity_range
        if not (0 <= lo <= hi < 1):
            raise ShapeError(f"initial_sparsity_range must satisfy 0<=lo<=hi<1, got {lo},{hi}")
        if self.pool_size < 2:
            raise ShapeError("pool_size must be >= 2 (crossover needs two parents)")


@dataclass
class Solution:
    """One candidate subnetwork in the pool."""

    weights: dict[str, np.ndarray]
    sparsities: dict[str, float]
    accuracy: float = 0.0
    age: int = 0

    def copy(self) -> "Solution":
        return Solution({k: v.copy() for k, v in self.weights.items()},
                        dict(self.sparsities), self.accuracy, self.age)

    def weighted_sparsity(self) -> float:
        """Parameter-count-weighted average of per-layer sparsities."""
        total = sum(self.weights[n].size for n in self.sparsities)
        return sum(self.sparsities[n] * self.weights[n].size for n in self.sparsities) / total


def weight_importance(w: np.ndarray, grad: np.ndarray, alpha: float) -> np.ndarray:
    """Importance score: alpha * grad_statistic + (1 - alpha) * |w|."""
    if w.shape != grad.shape:
        raise ShapeError("weight/gradient shapes differ")
    if not 0 <= alpha <= 1:
        raise ShapeError(f"alpha must be in [0,1], got {alpha}")
    return alpha * grad + (1 - alpha) * np.abs(w)


def recompute_mask(wg: np.ndarray, sparsity: float) -> np.ndarray:
    """Binary mask keeping exactly ceil((1-sparsity)*n) largest-score
    positions; ties broken toward the lower flat index."""
    if not 0 <= sparsity < 1:
        raise ShapeError(f"sparsity must be in [0,1), got {sparsity}")
    n = wg.size
    keep = math.ceil((1 - sparsity) * n)
    order = np.argsort(-wg.ravel(), kind="stable")
    mask = np.zeros(n, dtype=wg.dtype)
    mask[order[:keep]] = 1
    return mask.reshape(wg.shape)


def mutate(sol: Solution, rng: np.random.Generator, increment: float,
           max_sparsity: float = 0.99, up_probability: float = 0.7) -> Solution:
    """Random sparsity perturbation of a uniform layer subset; weights untouched.

    Steps are +/- increment with a configurable upward bias so the population
    keeps compression pressure while still being able to back off.
    """
    child = sol.copy()
    child.age = 0
    names = list(child.sparsities)
    chosen = [n for n in names if rng.random() < 0.5]
    if not chosen:
        chosen = [names[rng.integers(len(names))]]
    for n in chosen:
        delta = increment if rng.random() < up_probability else -increment
        child.sparsities[n] = float(np.clip(child.sparsities[n] + delta, 0.0, max_sparsity))
    return child


def crossover(a: Solution, b: Solution, rng: np.random.Generator) -> Solution:
    """Child takes each layer's sparsity from either parent; weights from a."""
    if set(a.sparsities) != set(b.sparsities) or any(
        a.weights[k].shape != b.weights[k].shape for k in a.weights
    ):
        raise ShapeError("crossover parents must share the architecture")
    child = a.copy()
    child.age = 0
    for n in child.sparsities:
        if rng.random() < 0.5:
            child.sparsities[n] = b.sparsities[n]
    return child


def check_weights_migration(prev_mask: dict[str, np.ndarray],
                            new_mask: dict[str, np.ndarray],
                            gain: float = 1.0, alpha_min: float = 0.05,
                            alpha_max: float = 0.9) -> float:
    """Map the mask-flip rate to the importance-mix alpha."""
    changed = 0
    total = 0
    for name, pm in prev_mask.items():
        nm = new_mask[name]
        if pm.shape != nm.shape:
            raise ShapeError("mask shapes differ")
        changed += int(np.sum(pm != nm))
        total += pm.size
    rate = changed / total if total else 0.0
    return float(np.clip(rate * gain, alpha_min, alpha_max))


def differentiate_pool(pool: list[Solution], rng: np.random.Generator,
                       increment: float, max_sparsity: float = 0.99) -> list[Solution]:
    """Cluster the pool by sparsity vectors, keep the best member of each
    cluster, refill with mutations of the survivors."""
    names = sorted(pool[0].sparsities)
    vectors = np.array([[s.sparsities[n] for n in names] for s in pool])
    k = max(1, len(pool) // 2)
    _, labels, _ = kmeans(vectors, k, rng)
    survivors = []
    for j in sorted(set(labels.tolist())):
        members = [s for s, lab in zip(pool, labels) if lab == j]
        survivors.append(max(members, key=lambda s: s.accuracy))
    out = [s.copy() for s in survivors]
    i = 0
    while len(out) < len(pool):
        out.append(mutate(survivors[i % len(survivors)], rng, increment, max_sparsity))
        i += 1
    return out


class _Run:
    """Internal state of one prune_run."""

    def __init__(self, config, net, x_tr, y_tr, x_val, y_val):
        self.cfg = config
        self.net = net
        self.data = (x_tr, y_tr, x_val, y_val)
        self.rng = np.random.default_rng(config.seed)
        self.alpha = config.alpha_min
        self.grad_stats: dict[str, np.ndarray] = {}
        self.sensitivity = {n: 0.0 for n in net.weight_names}
        self.history: list[dict] = []

    def masks_for(self, sol: Solution) -> dict[str, np.ndarray]:
        masks = {}
        for name in self.net.weight_names:
            w = sol.weights[name]
            grad = self.grad_stats.get(name, np.zeros_like(w, dtype=np.float64))
            wg = weight_importance(w, grad.astype(w.dtype), self.alpha)
            masks[name] = recompute_mask(wg, sol.sparsities[name])
        return masks


def generate_pool(config: PruneConfig, net: ToyNet, x_val, y_val,
                  rng: np.random.Generator) -> list[Solution]:
    lo, hi = config.initial_sparsity_range
    base = net.copy_weights()
    pool = []
    for _ in range(config.pool_size):
        sparsities = {n: float(rng.uniform(lo, hi)) for n in net.weight_names}
        weights = {k: v.copy() for k, v in base.items()}
        for name in net.weight_names:
            mask = recompute_mask(np.abs(weights[name]), sparsities[name])
            weights[name] = weights[name] * mask
        net.set_weights(weights)
        pool.append(Solution(weights, sparsities, accuracy=net.accuracy(x_val, y_val)))
    net.set_weights(base)
    return pool


def prune_run(config: PruneConfig, net: ToyNet, data,
              log_path=None) -> tuple[Solution, list[dict]]:
    """Full evolutionary pruning loop over a (x, y) dataset.

    The dataset is split into a fixed held-out validation fraction. Returns
    (best solution, per-iteration history records). With target_sparsity set,
    the best solution is the most accurate one at or above that weighted
    sparsity (falling back to the sparsest member).
    """
    x, y = data
    x_tr, y_tr, x_val, y_val = split_train_val(x, y, config.val_fraction, config.seed)
    run = _Run(config, net, x_tr, y_tr, x_val, y_val)
    rng = run.rng
    pool = generate_pool(config, net, x_val, y_val, rng)
    best_seen = max(s.accuracy for s in pool)
    stagnant = 0
    log_records = []

    for it in range(config.iter_nr):
        si = int(rng.integers(len(pool)))
        sol = pool[si]
        net.set_weights(sol.weights)
        masks = run.masks_for(sol)
        for name in net.weight_names:
            net.params[name] *= masks[name]
        snapshot = (net.copy_weights(), {k: m.copy() for k, m in masks.items()})

        n_choose = math.ceil(len(net.weight_names) / 3)
        chosen = list(rng.choice(net.weight_names, size=n_choose, replace=False))
        prev_masks = {n: masks[n].copy() for n in chosen}

        try:
            _, run.grad_stats = train_batches(
                net, x_tr, y_tr, config.batch_nr, config.lr, config.batch_size,
                masks, rng, run.grad_stats, config.ema_decay)
            failed = False
        except TrainingError:
            log.warning("iteration %d aborted on non-finite loss; rewinding", it)
            failed = True

        acc = sol.accuracy if failed else net.accuracy(x_val, y_val)
        improvement = acc - sol.accuracy

        new_masks = {}
        for name in chosen:
            wg = weight_importance(net.params[name],
                                   run.grad_stats.get(name, np.zeros_like(net.params[name])).astype(net.dtype),
                                   run.alpha)
            new_masks[name] = recompute_mask(wg, sol.sparsities[name])

        # acc_threshold is the tolerated accuracy change: keep pruning while
        # the drop stays within it, rewind when a step degrades beyond it
        if not failed and improvement >= -config.acc_threshold:
            trained = Solution(net.copy_weights(), dict(sol.sparsities), acc)
            self_ranked = sorted(chosen, key=lambda n: run.sensitivity[n], reverse=True)
            for rank, name in enumerate(self_ranked):
                # most accuracy-sensitive layer gets the gentlest increment
                scale = 0.5 + (rank / max(len(self_ranked) - 1, 1))
                trained.sparsities[name] = float(np.clip(
                    trained.sparsities[name] + config.mask_increment * scale,
                    0.0, config.max_sparsity))
                wg = weight_importance(trained.weights[name],
                                       run.grad_stats.get(name, np.zeros_like(trained.weights[name])).astype(net.dtype),
                                       run.alpha)
                new_masks[name] = recompute_mask(wg, trained.sparsities[name])
                trained.weights[name] = trained.weights[name] * new_masks[name]
            pool[si] = trained
        else:
            # rewind to the exact pre-iteration snapshot, then vary the genome
            weights_snap, masks_snap = snapshot
            net.set_weights(weights_snap)
            masks = masks_snap
            if rng.random() < 0.5:
                child = mutate(sol, rng, config.mask_increment, config.max_sparsity)
            else:
                other = pool[int(rng.integers(len(pool)))]
                child = crossover(sol, other, rng)
            net.set_weights(child.weights)
            for name in net.weight_names:
                m = recompute_mask(np.abs(net.params[name]), child.sparsities[name])
                net.params[name] *= m
            child.weights = net.copy_weights()
            child.accuracy = net.accuracy(x_val, y_val)
            # elitist replacement: the child enters only by beating the least
            # fit member on accuracy + sparsity-bonus fitness
            fit = lambda s: s.accuracy + config.fitness_sparsity_weight * s.weighted_sparsity()
            wi = int(np.argmin([fit(s) for s in pool]))
            if fit(child) > fit(pool[wi]):
                pool[wi] = child

        run.alpha = check_weights_migration(prev_masks, new_masks,
                                            config.alpha_gain, config.alpha_min,
                                            config.alpha_max)
        for name in chosen:
            run.sensitivity[name] = (config.ema_decay * run.sensitivity[name]
                                     + (1 - config.ema_decay) * abs(improvement))

        pool_best = max(s.accuracy for s in pool)
        if pool_best > best_seen + 1e-12:
            best_seen = pool_best
            stagnant = 0
        else:
            stagnant += 1
        if stagnant >= config.stagnation_window:
            pool = differentiate_pool(pool, rng, config.mask_increment, config.max_sparsity)
            for s in pool:
                if s.accuracy == 0.0:
                    net.set_weights(s.weights)
                    s.accuracy = net.accuracy(x_val, y_val)
            stagnant = 0

        record = {
            "iteration": it,
            "accuracy": float(pool[si].accuracy),
            "alpha": float(run.alpha),
            "layer_sparsities": {n: float(v) for n, v in pool[si].sparsities.items()},
            "weighted_sparsity": float(pool[si].weighted_sparsity()),
            "pool_best_accuracy": float(pool_best),
            "chosen_layers": chosen,
        }
        run.history.append(record)
        log_records.append(record)

    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in log_records:
                fh.write(json.dumps(rec) + "\n")

    best = _select_best(pool, config.target_sparsity)
    net.set_weights(best.weights)
    return best, run.history


def _select_best(pool: list[Solution], target: float | None) -> Solution:
    if target is not None:
        eligible = [s for s in pool if s.weighted_sparsity() >= target]
        if eligible:
            return max(eligible, key=lambda s: s.accuracy)
        return max(pool, key=lambda s: (s.weighted_sparsity(), s.accuracy))
    return max(pool, key=lambda s: (s.accuracy, s.weighted_sparsity()))


class EvolutionaryPruner(ClassifierMixin, BaseEstimator):
    """sklearn-style wrapper: fit() trains and prunes a ToyNet on NCHW images.

    After fitting, `net_` holds the pruned network, `best_solution_` the
    winning pool member and `history_` the per-iteration records.
    """

    def __init__(self, acc_threshold=0.002, iter_nr=60, batch_nr=20, pool_size=6,
                 initial_sparsity_range=(0.4, 0.7), mask_increment=0.05,
                 target_sparsity=None, lr=0.05, batch_size=32,
                 conv_channels=(8, 8), kernel_size=3, random_state=0):
        self.acc_threshold = acc_threshold
        self.iter_nr = iter_nr
        self.batch_nr = batch_nr
        self.pool_size = pool_size
        self.initial_sparsity_range = initial_sparsity_range
        self.mask_increment = mask_increment
        self.target_sparsity = target_sparsity
        self.lr = lr
        self.batch_size = batch_size
        self.conv_channels = conv_channels
        self.kernel_size = kernel_size
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X)
        if X.ndim != 4:
            raise ShapeError("X must be NCHW images")
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        cfg = PruneConfig(
            acc_threshold=self.acc_threshold, iter_nr=self.iter_nr,
            batch_nr=self.batch_nr, pool_size=self.pool_size,
            initial_sparsity_range=tuple(self.initial_sparsity_range),
            mask_increment=self.mask_increment, seed=self.random_state,
            target_sparsity=self.target_sparsity, lr=self.lr,
            batch_size=self.batch_size)
        self.net_ = ToyNet(in_channels=X.shape[1], image_size=X.shape[2],
                           conv_channels=tuple(self.conv_channels),
                           kernel_size=self.kernel_size,
                           num_classes=len(self.classes_), seed=self.random_state)
        self.best_solution_, self.history_ = prune_run(cfg, self.net_, (X, y))
        return self

    def predict(self, X):
        return self.classes_[self.net_.predict(np.asarray(X))]

    def score(self, X, y, sample_weight=None):
        return float(np.mean(self.predict(X) == np.asarray(y)))
