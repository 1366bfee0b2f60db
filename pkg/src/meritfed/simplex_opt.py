"""Optimization primitives over the probability simplex.

The aggregation-weight subproblem minimizes the validation objective of the
candidate model point x - step * sum_i w_i g_i over weight vectors w on the
unit simplex. This module provides the multiplicative (entropic mirror
descent) update, the exact chain-rule gradient of that objective in w, a
two-point zeroth-order estimator, and the inner solver loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (
    InvalidDimensionError,
    InvalidSmoothingError,
    NumericInputError,
    ShapeError,
    SolverDegenerateError,
)
from .streams import unit_sphere_vector

SIMPLEX_SUM_TOL = 1e-9

ESTIMATOR_EXACT = "exact-chain-rule"
ESTIMATOR_ZO = "zeroth-order"


def uniform_weights(n: int) -> np.ndarray:
    """Uniform weight vector 1/n, the mirror-descent initialization."""
    if n < 1:
        raise InvalidDimensionError(f"weight vector needs at least one entry, got n={n}")
    return np.full(n, 1.0 / n)


def check_weights(w: np.ndarray, n: Optional[int] = None) -> np.ndarray:
    """Validate a weight vector: nonnegative entries summing to 1 within 1e-9."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size < 1:
        raise InvalidDimensionError(f"weights must be a nonempty vector, got shape {w.shape}")
    if n is not None and w.size != n:
        raise InvalidDimensionError(f"expected {n} weights, got {w.size}")
    if not np.all(np.isfinite(w)):
        raise NumericInputError("weights contain non-finite entries")
    if np.any(w < 0.0):
        raise NumericInputError(f"weights contain negative entries (min {w.min()})")
    if abs(float(w.sum()) - 1.0) > SIMPLEX_SUM_TOL:
        raise NumericInputError(f"weights sum to {w.sum()!r}, expected 1 within {SIMPLEX_SUM_TOL}")
    return w


def entropic_md_step(w: np.ndarray, g: np.ndarray, step_size: float) -> np.ndarray:
    """One multiplicative-weights step w_i' proportional to w_i * exp(-step_size * g_i).

    The exponent is shifted by its maximum over the support before
    exponentiation, which keeps the update exactly invariant to adding a
    constant to g and rules out overflow. Entries of w that are exactly zero
    stay zero.
    """
    w = np.asarray(w, dtype=float)
    g = np.asarray(g, dtype=float)
    if g.shape != w.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match weights {w.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericInputError("mirror-descent step received a non-finite gradient")
    support = w > 0.0
    z = -step_size * g[support]
    z -= z.max()
    out = np.zeros_like(w)
    out[support] = w[support] * np.exp(z)
    total = float(out.sum())
    if not np.isfinite(total) or total <= 0.0:
        raise SolverDegenerateError("multiplicative update produced no positive mass")
    return out / total


def weight_gradient_exact(
    x: np.ndarray,
    gradients: np.ndarray,
    model_step: float,
    val_grad: Callable[[np.ndarray], np.ndarray],
    w: np.ndarray,
) -> np.ndarray:
    """Exact gradient of w -> f_hat(x - model_step * sum_i w_i g_i).

    By the chain rule the i-th component is
    -model_step * <g_i, grad f_hat(candidate)>.
    """
    x = np.asarray(x, dtype=float)
    gradients = np.asarray(gradients, dtype=float)
    if gradients.ndim != 2 or gradients.shape[1] != x.shape[0]:
        raise ShapeError(
            f"gradient set shape {gradients.shape} does not match point dimension {x.shape[0]}"
        )
    candidate = x - model_step * (np.asarray(w, dtype=float) @ gradients)
    return -model_step * (gradients @ np.asarray(val_grad(candidate), dtype=float))


def zo_two_point_estimate(
    objective: Callable[[np.ndarray], float],
    w: np.ndarray,
    smoothing: float,
    direction: np.ndarray,
) -> np.ndarray:
    """Two-point directional estimate n * (phi(w+h e) - phi(w-h e)) / (2h) * e.

    The caller supplies a unit direction e; the objective must be evaluable at
    w +- h e (the candidate-point construction is defined on all of R^n).
    """
    if smoothing <= 0.0:
        raise InvalidSmoothingError(f"smoothing radius must be positive, got {smoothing}")
    w = np.asarray(w, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if direction.shape != w.shape:
        raise ShapeError(f"direction shape {direction.shape} does not match weights {w.shape}")
    n = w.size
    delta = float(objective(w + smoothing * direction)) - float(objective(w - smoothing * direction))
    return (n * delta / (2.0 * smoothing)) * direction


@dataclass
class MdConfig:
    """Inner-solver settings for the aggregation-weight subproblem.

    step_size is consumed literally by the multiplicative update. minibatch=0
    evaluates step gradients on the full validation set; minibatch>0 draws a
    fresh validation subset per step. The zeroth-order estimator draws a fresh
    unit direction per step from rng.
    """

    step_size: float
    step_count: int
    estimator: str = ESTIMATOR_EXACT
    smoothing: float = 1e-4
    minibatch: int = 0
    rng: Optional[np.random.Generator] = None

    def __post_init__(self) -> None:
        if self.step_size <= 0.0:
            raise InvalidDimensionError(f"step_size must be positive, got {self.step_size}")
        if self.step_count < 1:
            raise InvalidDimensionError(f"step_count must be >= 1, got {self.step_count}")
        if self.smoothing <= 0.0:
            raise InvalidSmoothingError(f"smoothing must be positive, got {self.smoothing}")
        if self.estimator not in (ESTIMATOR_EXACT, ESTIMATOR_ZO):
            raise InvalidDimensionError(f"unknown estimator {self.estimator!r}")
        if self.minibatch < 0:
            raise InvalidDimensionError(f"minibatch must be >= 0, got {self.minibatch}")


@dataclass
class WeightObjective:
    """The weight subproblem: evaluate f_hat at x - model_step * sum_i w_i g_i.

    loss_oracle must expose evaluate(point, minibatch=0, rng=None) returning
    (value, gradient) of the validation objective, and a size attribute.
    """

    x: np.ndarray
    gradients: np.ndarray
    model_step: float
    loss_oracle: object

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        self.gradients = np.asarray(self.gradients, dtype=float)
        if self.gradients.ndim != 2 or self.gradients.shape[1] != self.x.shape[0]:
            raise ShapeError(
                f"gradient set shape {self.gradients.shape} does not match "
                f"point dimension {self.x.shape[0]}"
            )
        if self.model_step <= 0.0:
            raise InvalidDimensionError(f"model_step must be positive, got {self.model_step}")

    @property
    def n(self) -> int:
        return self.gradients.shape[0]

    def candidate(self, w: np.ndarray) -> np.ndarray:
        return self.x - self.model_step * (np.asarray(w, dtype=float) @ self.gradients)

    def value(self, w: np.ndarray, minibatch: int = 0, rng=None) -> float:
        value, _ = self.loss_oracle.evaluate(self.candidate(w), minibatch=minibatch, rng=rng)
        return float(value)

    def gradient(self, w: np.ndarray, minibatch: int = 0, rng=None) -> np.ndarray:
        """Exact chain-rule gradient in w, optionally on a validation minibatch."""
        _, val_grad = self.loss_oracle.evaluate(self.candidate(w), minibatch=minibatch, rng=rng)
        return -self.model_step * (self.gradients @ np.asarray(val_grad, dtype=float))


def solve_weights(obj: WeightObjective, cfg: MdConfig) -> tuple[np.ndarray, float]:
    """Approximately minimize the weight subproblem over the simplex.

    Runs cfg.step_count multiplicative updates from the uniform vector, each
    driven by the exact chain-rule gradient (full validation set, or a fresh
    minibatch per step when cfg.minibatch > 0) or by the two-point estimator
    along a fresh random unit direction. Every iterate is scored on the full
    validation set; the best-scoring iterate is returned together with the
    solver-accuracy proxy phi(last iterate) - phi(best iterate) >= 0.
    """
    oracle_size = getattr(obj.loss_oracle, "size", None)
    if cfg.minibatch > 0 and oracle_size is not None and cfg.minibatch > oracle_size:
        raise InvalidDimensionError(
            f"minibatch {cfg.minibatch} exceeds validation set size {oracle_size}"
        )
    w = uniform_weights(obj.n)
    best_w = w
    best_value = obj.value(w)
    last_value = best_value
    for _ in range(cfg.step_count):
        if cfg.estimator == ESTIMATOR_EXACT:
            g = obj.gradient(w, minibatch=cfg.minibatch, rng=cfg.rng)
        else:
            if cfg.rng is None:
                raise NumericInputError("zeroth-order estimator needs an rng for directions")
            direction = unit_sphere_vector(cfg.rng, obj.n)
            phi = _step_objective(obj, cfg)
            g = zo_two_point_estimate(phi, w, cfg.smoothing, direction)
        w = entropic_md_step(w, g, cfg.step_size)
        last_value = obj.value(w)
        if last_value < best_value:
            best_value = last_value
            best_w = w
    delta_estimate = max(last_value - best_value, 0.0)
    return best_w, delta_estimate


def _step_objective(obj: WeightObjective, cfg: MdConfig) -> Callable[[np.ndarray], float]:
    """Objective evaluator for one zeroth-order step.

    With a positive minibatch, one validation subset is drawn and held fixed
    across the step's two-point evaluation pair.
    """
    oracle = obj.loss_oracle
    if cfg.minibatch > 0 and hasattr(oracle, "sample_rows"):
        rows = oracle.sample_rows(cfg.minibatch, cfg.rng)
        return lambda v: float(oracle.evaluate_rows(obj.candidate(v), rows)[0])
    return lambda v: obj.value(v)


def simplex_grid(n: int, resolution: float) -> np.ndarray:
    """All grid points of the unit simplex at the given coordinate resolution.

    Used as a brute-force oracle and as the small-n solver-gap estimator.
    Supports n <= 3 (the grid grows combinatorially beyond that).
    """
    if n < 1 or n > 3:
        raise InvalidDimensionError(f"simplex grid supports 1 <= n <= 3, got {n}")
    steps = int(round(1.0 / resolution))
    if steps < 1:
        raise InvalidDimensionError(f"resolution {resolution} coarser than the whole simplex")
    if n == 1:
        return np.array([[1.0]])
    if n == 2:
        a = np.arange(steps + 1) / steps
        return np.column_stack([a, 1.0 - a])
    points = []
    for i in range(steps + 1):
        for j in range(steps + 1 - i):
            points.append((i / steps, j / steps, (steps - i - j) / steps))
    return np.array(points)
