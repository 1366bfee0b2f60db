"""Task definitions: objectives, client data generation, validation oracles.

Two desk-scale tasks are implemented. The mean-estimation task minimizes
E||x - xi||^2 over Gaussian samples with identity covariance, so every
closed-form constant is available (optimum at the distribution center,
optimal value d, smoothness 2, PL constant 2, gradient-noise variance 4d/b
at batch size b). The softmax task is a linear classifier on well-separated
Gaussian class clusters with three client groups: target classes only, an
alpha-mixture of target and mixed-in classes, and disjoint classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    EmptyBatchError,
    ShapeError,
    UnsupportedTaskError,
)
from . import streams

KIND_GAUSSIAN = "gaussian-mean"
KIND_SOFTMAX = "softmax-cluster"

MODE_EXTRA = "extra-validation"
MODE_REUSE_TRAIN = "reuse-train"
MODE_POPULATION = "population"

# Softmax class layout: clients see target classes, an alpha-mixture of target
# and mixed-in classes, or disjoint classes only.
TARGET_CLASSES = (0, 1, 2)
MIXED_CLASSES = (3, 4, 5)
CLASS_CENTER_DISTANCE = 4.0

MEAN_SMOOTHNESS = 2.0
MEAN_PL_CONSTANT = 2.0


@dataclass
class DistributionSpec:
    """One client group's data distribution."""

    kind: str
    group_id: int
    center: Optional[np.ndarray] = None  # gaussian-mean
    alpha: float = 1.0  # softmax-cluster mixing fraction

    def __post_init__(self) -> None:
        if self.kind not in (KIND_GAUSSIAN, KIND_SOFTMAX):
            raise ConfigError(f"unknown distribution kind {self.kind!r}")
        if self.kind == KIND_GAUSSIAN:
            if self.center is None:
                raise ConfigError("gaussian-mean distribution needs a center")
            self.center = np.asarray(self.center, dtype=float)
        if self.kind == KIND_SOFTMAX and not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"mixing fraction must lie in (0, 1], got {self.alpha}")


@dataclass
class DatasetShard:
    """One client's local dataset."""

    samples: np.ndarray  # (count, d) features; mean task uses these directly
    owner: int
    group_id: int
    labels: Optional[np.ndarray] = None  # softmax task only

    @property
    def count(self) -> int:
        return self.samples.shape[0]


def mean_loss(x: np.ndarray, sample: np.ndarray) -> float:
    """Squared distance ||x - sample||^2."""
    x = np.asarray(x, dtype=float)
    sample = np.asarray(sample, dtype=float)
    if x.shape != sample.shape:
        raise ShapeError(f"point shape {x.shape} does not match sample shape {sample.shape}")
    r = x - sample
    return float(r @ r)


def mean_grad(x: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """Stochastic gradient 2(x - batch mean) of the mean-estimation loss."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[0] == 0:
        raise EmptyBatchError("gradient requested on an empty batch")
    x = np.asarray(x, dtype=float)
    if batch.shape[1] != x.shape[0]:
        raise ShapeError(f"batch dimension {batch.shape[1]} does not match point {x.shape[0]}")
    return 2.0 * (x - batch.mean(axis=0))


def mean_true_optimum(spec: DistributionSpec) -> tuple[np.ndarray, float]:
    """Closed-form optimum of E||x - xi||^2: the center, with value d."""
    if spec.kind != KIND_GAUSSIAN:
        raise UnsupportedTaskError("closed-form optimum is defined for the gaussian task only")
    center = np.asarray(spec.center, dtype=float)
    return center.copy(), float(center.size)


def generate_mean_shards(
    master_seed: int, centers: np.ndarray, shard_size: int
) -> list[DatasetShard]:
    """Per-client Gaussian shards with identity covariance around each center.

    Client i's shard comes from its own named stream, so shard contents are
    independent of client count and of generation order.
    """
    centers = np.asarray(centers, dtype=float)
    shards = []
    for i in range(centers.shape[0]):
        rng = streams.substream(master_seed, streams.SHARDS, i)
        samples = centers[i] + rng.standard_normal((shard_size, centers.shape[1]))
        shards.append(DatasetShard(samples=samples, owner=i, group_id=-1))
    return shards


def softmax_class_centers(n_classes: int, feature_dim: int) -> np.ndarray:
    """Fixed class centers at pairwise distance CLASS_CENTER_DISTANCE.

    Center k sits on coordinate axis k scaled so distinct centers are exactly
    that far apart, keeping the Bayes classifier near-perfect.
    """
    if n_classes > feature_dim:
        raise ConfigError(
            f"need feature_dim >= n_classes for axis-aligned centers, "
            f"got {feature_dim} < {n_classes}"
        )
    scale = CLASS_CENTER_DISTANCE / np.sqrt(2.0)
    centers = np.zeros((n_classes, feature_dim))
    centers[np.arange(n_classes), np.arange(n_classes)] = scale
    return centers


def _softmax_labels_for_group(
    rng: np.random.Generator, count: int, group_id: int, alpha: float, n_classes: int
) -> np.ndarray:
    target = np.asarray(TARGET_CLASSES)
    mixed = np.asarray(MIXED_CLASSES)
    disjoint = np.arange(max(MIXED_CLASSES) + 1, n_classes)
    if group_id == 1:
        return rng.choice(target, size=count)
    if group_id == 2:
        take_target = rng.random(count) < alpha
        labels = np.where(take_target, rng.choice(target, size=count), rng.choice(mixed, size=count))
        return labels
    if group_id == 3:
        if disjoint.size == 0:
            raise ConfigError("softmax task needs classes beyond the mixed-in set for group 3")
        return rng.choice(disjoint, size=count)
    raise ConfigError(f"unknown softmax group id {group_id}")


def softmax_task_generate(
    n_clients: int,
    group_counts: tuple[int, int, int],
    alpha: float,
    feature_dim: int,
    n_classes: int,
    shard_size: int,
    master_seed: int,
    validation_size: int,
    test_size: int,
) -> tuple[list[DatasetShard], DatasetShard, DatasetShard]:
    """Client shards plus held-out target-distribution validation and test shards."""
    if sum(group_counts) != n_clients:
        raise ConfigError(f"group counts {group_counts} do not sum to n={n_clients}")
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"mixing fraction must lie in (0, 1], got {alpha}")
    centers = softmax_class_centers(n_classes, feature_dim)
    group_of = [1] * group_counts[0] + [2] * group_counts[1] + [3] * group_counts[2]
    shards = []
    for i in range(n_clients):
        rng = streams.substream(master_seed, streams.SHARDS, i)
        labels = _softmax_labels_for_group(rng, shard_size, group_of[i], alpha, n_classes)
        features = centers[labels] + rng.standard_normal((shard_size, feature_dim))
        shards.append(DatasetShard(samples=features, owner=i, group_id=group_of[i], labels=labels))

    def held_out(tag: int, count: int, owner: int) -> DatasetShard:
        rng = streams.substream(master_seed, tag)
        labels = rng.choice(np.asarray(TARGET_CLASSES), size=count)
        features = centers[labels] + rng.standard_normal((count, feature_dim))
        return DatasetShard(samples=features, owner=owner, group_id=1, labels=labels)

    validation = held_out(streams.VALIDATION, validation_size, -1)
    test = held_out(streams.TEST_SET, test_size, -2)
    return shards, validation, test


def softmax_loss_grad(
    theta: np.ndarray, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of a linear softmax classifier and its exact gradient.

    theta has shape (n_classes, feature_dim); the gradient has the same shape.
    """
    theta = np.asarray(theta, dtype=float)
    features = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels)
    if features.shape[0] == 0:
        raise EmptyBatchError("softmax loss requested on an empty batch")
    if theta.ndim != 2 or features.shape[1] != theta.shape[1]:
        raise ShapeError(f"theta shape {theta.shape} does not match features {features.shape}")
    n_classes = theta.shape[0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"label outside class range [0, {n_classes})")
    logits = features @ theta.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    m = features.shape[0]
    loss = float(np.mean(log_norm - shifted[np.arange(m), labels]))
    probs = np.exp(shifted - log_norm[:, None])
    probs[np.arange(m), labels] -= 1.0
    grad = probs.T @ features / m
    return loss, grad


def softmax_accuracy(theta: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose argmax logit matches the label."""
    logits = np.atleast_2d(features) @ np.asarray(theta, dtype=float).T
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


class MeanValidationOracle:
    """Empirical mean-estimation objective over a held-out sample set.

    f_hat(x) = mean_i ||x - xi_i||^2 evaluated in O(d) through the precomputed
    sample mean and mean squared norm.
    """

    def __init__(self, samples: np.ndarray, mode: str = MODE_EXTRA) -> None:
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if samples.shape[0] == 0:
            raise ConfigError("validation set is empty")
        self.samples = samples
        self.mode = mode
        self.mean = samples.mean(axis=0)
        self.mean_sq_norm = float(np.mean((samples * samples).sum(axis=1)))

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    def sample_rows(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.size, size=count, replace=False)

    def evaluate_rows(self, x: np.ndarray, rows: np.ndarray) -> tuple[float, np.ndarray]:
        subset = self.samples[rows]
        sub_mean = subset.mean(axis=0)
        value = float(x @ x - 2.0 * (x @ sub_mean) + np.mean((subset * subset).sum(axis=1)))
        return value, 2.0 * (x - sub_mean)

    def evaluate(
        self, x: np.ndarray, minibatch: int = 0, rng: Optional[np.random.Generator] = None
    ) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if minibatch < 0 or minibatch > self.size:
            raise ConfigError(f"minibatch {minibatch} out of range for validation size {self.size}")
        if minibatch in (0, self.size):
            value = float(x @ x - 2.0 * (x @ self.mean) + self.mean_sq_norm)
            return value, 2.0 * (x - self.mean)
        if rng is None:
            raise ConfigError("minibatch evaluation needs an rng")
        return self.evaluate_rows(x, self.sample_rows(minibatch, rng))


class PopulationMeanOracle:
    """Noise-free mean-estimation objective from the known distribution center.

    Evaluates the true expected loss ||x - center||^2 + d; used by
    verification runs that need an exact validation gradient.
    """

    def __init__(self, center: np.ndarray) -> None:
        self.center = np.asarray(center, dtype=float)
        self.mode = MODE_POPULATION

    @property
    def size(self) -> int:
        return 0

    def evaluate(
        self, x: np.ndarray, minibatch: int = 0, rng: Optional[np.random.Generator] = None
    ) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        r = x - self.center
        return float(r @ r) + float(self.center.size), 2.0 * r


class SoftmaxValidationOracle:
    """Empirical cross-entropy objective over a held-out labeled sample set."""

    def __init__(self, shard: DatasetShard, n_classes: int, mode: str = MODE_EXTRA) -> None:
        if shard.count == 0:
            raise ConfigError("validation set is empty")
        self.shard = shard
        self.n_classes = n_classes
        self.mode = mode

    @property
    def size(self) -> int:
        return self.shard.count

    def sample_rows(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.size, size=count, replace=False)

    def evaluate_rows(self, x: np.ndarray, rows: np.ndarray) -> tuple[float, np.ndarray]:
        theta = np.asarray(x, dtype=float).reshape(self.n_classes, -1)
        loss, grad = softmax_loss_grad(theta, self.shard.samples[rows], self.shard.labels[rows])
        return loss, grad.ravel()

    def evaluate(
        self, x: np.ndarray, minibatch: int = 0, rng: Optional[np.random.Generator] = None
    ) -> tuple[float, np.ndarray]:
        if minibatch < 0 or minibatch > self.size:
            raise ConfigError(f"minibatch {minibatch} out of range for validation size {self.size}")
        if minibatch in (0, self.size):
            theta = np.asarray(x, dtype=float).reshape(self.n_classes, -1)
            loss, grad = softmax_loss_grad(theta, self.shard.samples, self.shard.labels)
            return loss, grad.ravel()
        if rng is None:
            raise ConfigError("minibatch evaluation needs an rng")
        return self.evaluate_rows(x, self.sample_rows(minibatch, rng))


def validation_eval(
    oracle, x: np.ndarray, minibatch: int = 0, rng: Optional[np.random.Generator] = None
) -> tuple[float, np.ndarray]:
    """Evaluate a validation oracle: (f_hat value, f_hat gradient).

    minibatch=0 uses the full held-out set; minibatch>0 samples that many
    rows without replacement from the supplied stream.
    """
    return oracle.evaluate(x, minibatch=minibatch, rng=rng)


def save_shard(path: str, shard: DatasetShard) -> None:
    """Write a mean-task shard as delimited text with a one-line header."""
    header = f"{shard.samples.shape[1]} {shard.count} {shard.group_id}"
    np.savetxt(path, shard.samples, fmt="%.17g", header=header, comments="# ")


def load_shard(path: str, owner: int = -1) -> DatasetShard:
    """Read a mean-task shard written by save_shard."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith("# "):
        raise DataError(f"{path}: missing shard header line")
    try:
        dim, count, group_id = (int(tok) for tok in first[2:].split())
    except ValueError as exc:
        raise DataError(f"{path}: malformed shard header {first!r}") from exc
    samples = np.loadtxt(path, ndmin=2)
    if samples.shape != (count, dim):
        raise DataError(f"{path}: shard body {samples.shape} does not match header ({count}, {dim})")
    return DatasetShard(samples=samples, owner=owner, group_id=group_id)
