"""Federated round-loop orchestration.

One experiment holds a fixed client population (honest groups plus optional
Byzantine workers) and runs every configured method side by side from the
same initial point. Per-(client, round) sample draws come from named streams
independent of the method, so sampling noise is coupled across methods; the
colluding attacks run in a second phase after all honest messages of the
round exist. Per-round metrics, weight trajectories, and convergence-bound
reports are collected for the output layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import streams
from .aggregators import (
    KIND_FEDADP,
    KIND_FEDAVG,
    KIND_MERITFED,
    KIND_SGD_FULL,
    KIND_SGD_IDEAL,
    KIND_TAWT,
    MethodConfig,
    MethodState,
    apply_update,
    weights_fedadp,
    weights_fedavg_sampled,
    weights_meritfed,
    weights_sgd_full,
    weights_sgd_ideal,
    weights_tawt,
)
from .clients import (
    ATTACK_RANDOM_NOISE,
    AttackSpec,
    ClientRole,
    GradientSet,
    byzantine_messages,
)
from .errors import ConfigError
from .simplex_opt import WeightObjective, check_weights, simplex_grid
from .tasks import (
    MEAN_PL_CONSTANT,
    MEAN_SMOOTHNESS,
    MODE_EXTRA,
    MODE_POPULATION,
    MODE_REUSE_TRAIN,
    DatasetShard,
    MeanValidationOracle,
    PopulationMeanOracle,
    SoftmaxValidationOracle,
    generate_mean_shards,
    softmax_accuracy,
    softmax_loss_grad,
    softmax_task_generate,
)

TASK_MEAN = "mean"
TASK_SOFTMAX = "softmax"

DELTA_ESTIMATOR_ITERATE = "iterate-gap"
DELTA_ESTIMATOR_GRID = "grid-gap"
GRID_RESOLUTION = 0.01
MAX_GRID_CLIENTS = 3

# Observer callables receive (round, method label, point before the update,
# gradient set, weights, delta estimate, point after the update).
Observer = Callable[[int, str, np.ndarray, np.ndarray, np.ndarray, Optional[float], np.ndarray], None]


@dataclass
class ExperimentSpec:
    """Full description of one run."""

    methods: list[MethodConfig]
    task: str = TASK_MEAN
    dim: int = 10
    group_counts: tuple[int, int, int] = (5, 95, 50)
    byzantine_count: int = 0
    attack: Optional[AttackSpec] = None
    group2_shift: float = 0.1  # per-coordinate center of group 2 (mean task)
    shard_size: int = 1000
    batch_size: int = 100
    model_step: float = 0.01
    rounds: int = 2000
    validation_size: int = 100000
    validation_mode: str = MODE_EXTRA
    exact_gradients: bool = False
    master_seed: int = 0
    weight_log_every: int = 1
    mixing_alpha: float = 0.5  # softmax group-2 target-class fraction
    n_classes: int = 10
    test_size: int = 4000

    @property
    def n_clients(self) -> int:
        return int(sum(self.group_counts)) + int(self.byzantine_count)

    def validate(self) -> None:
        if self.task not in (TASK_MEAN, TASK_SOFTMAX):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.rounds < 1:
            raise ConfigError(f"round count must be >= 1, got {self.rounds}")
        if self.dim < 1:
            raise ConfigError(f"dimension must be >= 1, got {self.dim}")
        if any(c < 0 for c in self.group_counts):
            raise ConfigError(f"group counts must be nonnegative, got {self.group_counts}")
        if self.group_counts[0] < 1:
            raise ConfigError("the target group needs at least one honest client")
        if self.byzantine_count < 0:
            raise ConfigError(f"byzantine count must be >= 0, got {self.byzantine_count}")
        if self.byzantine_count > 0 and self.attack is None:
            raise ConfigError("byzantine clients need an attack spec")
        if not self.methods:
            raise ConfigError("at least one method is required")
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate method labels in {labels}")
        if not 1 <= self.batch_size <= self.shard_size:
            raise ConfigError(
                f"batch size {self.batch_size} out of range for shard size {self.shard_size}"
            )
        if self.validation_mode not in (MODE_EXTRA, MODE_REUSE_TRAIN, MODE_POPULATION):
            raise ConfigError(f"unknown validation mode {self.validation_mode!r}")
        if self.validation_mode == MODE_EXTRA and self.validation_size < 1:
            raise ConfigError("extra-validation mode needs validation_size >= 1")
        if self.weight_log_every < 1:
            raise ConfigError("weight_log_every must be >= 1")
        if self.task == TASK_SOFTMAX and self.exact_gradients:
            raise ConfigError("exact gradients are only defined for the mean task")
        if self.task == TASK_SOFTMAX and not 0.0 < self.mixing_alpha <= 1.0:
            raise ConfigError(f"mixing fraction must lie in (0, 1], got {self.mixing_alpha}")


@dataclass
class RoundMetrics:
    """State of one method at the start of a round (round == rounds for the final state)."""

    round_index: int
    method: str
    val_loss: float
    dist_sq: Optional[float] = None
    loss_gap: Optional[float] = None
    grad_norm_sq: Optional[float] = None
    accuracy: Optional[float] = None
    delta: Optional[float] = None


@dataclass
class ConvergenceRow:
    """Measured quantities of one method against the closed-form rate bounds."""

    method: str
    rounds: int
    group_size: int
    sigma_sq: float
    delta_bar: float
    delta_estimator: str
    initial_gap: float
    avg_grad_norm_sq: float
    noncvx_rhs: float
    noncvx_holds: bool
    final_gap: float
    pl_rhs: float
    pl_holds: bool
    step_size_ok: bool
    applies: bool


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    metrics: list[RoundMetrics]
    weight_rows: list[tuple[int, str, np.ndarray]]
    convergence: list[ConvergenceRow]
    mixture_direction: Optional[np.ndarray]
    final_points: dict[str, np.ndarray]
    oracle: object
    target_optimum: Optional[np.ndarray]
    shards: list[DatasetShard]


def build_roles(spec: ExperimentSpec) -> list[ClientRole]:
    """Client roles in index order: honest groups 1..3, then Byzantine workers."""
    roles = []
    index = 0
    for group_id, count in zip((1, 2, 3), spec.group_counts):
        for _ in range(count):
            roles.append(ClientRole(index=index, kind="honest", group_id=group_id))
            index += 1
    for _ in range(spec.byzantine_count):
        roles.append(ClientRole(index=index, kind="byzantine", group_id=0, attack=spec.attack))
        index += 1
    return roles


class RunState:
    """Mutable state of one experiment run."""

    def __init__(self, spec: ExperimentSpec) -> None:
        spec.validate()
        self.spec = spec
        self.roles = build_roles(spec)
        n, d = spec.n_clients, spec.dim
        seed = spec.master_seed
        self.group1_indices = [r.index for r in self.roles if r.kind == "honest" and r.group_id == 1]
        self.mixture_direction: Optional[np.ndarray] = None
        self.test_shard: Optional[DatasetShard] = None

        if spec.task == TASK_MEAN:
            self.mixture_direction = streams.unit_sphere_vector(
                streams.substream(seed, streams.MIXTURE_DIRECTION), d
            )
            centers = np.zeros((n, d))
            for role in self.roles:
                if role.kind == "byzantine" or role.group_id == 1:
                    continue  # target-distribution data, center stays zero
                if role.group_id == 2:
                    centers[role.index] = spec.group2_shift
                elif role.group_id == 3:
                    centers[role.index] = self.mixture_direction
            self.centers = centers
            self.target_optimum = np.zeros(d)
            self.shards = (
                []
                if spec.exact_gradients
                else generate_mean_shards(seed, centers, spec.shard_size)
            )
            if spec.validation_mode == MODE_POPULATION:
                self.oracle = PopulationMeanOracle(self.target_optimum)
            elif spec.validation_mode == MODE_REUSE_TRAIN:
                if spec.exact_gradients:
                    raise ConfigError("reuse-train validation needs realized shards")
                self.oracle = MeanValidationOracle(self.shards[0].samples, mode=MODE_REUSE_TRAIN)
            else:
                rng = streams.substream(seed, streams.VALIDATION)
                samples = rng.standard_normal((spec.validation_size, d))
                self.oracle = MeanValidationOracle(samples, mode=MODE_EXTRA)
            self.model_dim = d
            point0 = np.ones(d)
        else:
            if spec.validation_mode == MODE_POPULATION:
                raise ConfigError("population validation is only defined for the mean task")
            if spec.byzantine_count > 0:
                raise ConfigError("byzantine clients are supported on the mean task only")
            self.shards, validation, self.test_shard = softmax_task_generate(
                n_clients=n,
                group_counts=spec.group_counts,
                alpha=spec.mixing_alpha,
                feature_dim=d,
                n_classes=spec.n_classes,
                shard_size=spec.shard_size,
                master_seed=seed,
                validation_size=spec.validation_size,
                test_size=spec.test_size,
            )
            if spec.validation_mode == MODE_REUSE_TRAIN:
                self.oracle = SoftmaxValidationOracle(
                    self.shards[0], spec.n_classes, mode=MODE_REUSE_TRAIN
                )
            else:
                self.oracle = SoftmaxValidationOracle(validation, spec.n_classes, mode=MODE_EXTRA)
            self.centers = None
            self.target_optimum = None
            self.model_dim = spec.n_classes * d
            point0 = np.zeros(self.model_dim)

        self.points = {m.label: point0.copy() for m in spec.methods}
        self.method_states = {m.label: MethodState() for m in spec.methods}
        self.metrics: list[RoundMetrics] = []
        self.weight_rows: list[tuple[int, str, np.ndarray]] = []
        self.delta_sums = {m.label: 0.0 for m in spec.methods}
        self.delta_estimator = (
            DELTA_ESTIMATOR_GRID
            if spec.task == TASK_MEAN and n <= MAX_GRID_CLIENTS
            else DELTA_ESTIMATOR_ITERATE
        )
        self._grid = simplex_grid(n, GRID_RESOLUTION) if self.delta_estimator == DELTA_ESTIMATOR_GRID else None

    def batch_indices(self, client: int, round_index: int) -> np.ndarray:
        """The round's sample rows for one client, identical for every method."""
        rng = streams.substream(self.spec.master_seed, streams.BATCH, client, round_index)
        return rng.choice(self.spec.shard_size, size=self.spec.batch_size, replace=False)

    def honest_gradient_basis(self, round_index: int) -> np.ndarray:
        """Per-client batch means of the round (mean task)."""
        if self.spec.exact_gradients:
            return self.centers
        basis = np.empty((self.spec.n_clients, self.spec.dim))
        for i in range(self.spec.n_clients):
            rows = self.batch_indices(i, round_index)
            basis[i] = self.shards[i].samples[rows].mean(axis=0)
        return basis

    def state_metrics(self, label: str, round_index: int, delta: Optional[float]) -> RoundMetrics:
        x = self.points[label]
        val_loss, _ = self.oracle.evaluate(x)
        if self.spec.task == TASK_MEAN:
            r = x - self.target_optimum
            dist_sq = float(r @ r)
            return RoundMetrics(
                round_index=round_index,
                method=label,
                val_loss=float(val_loss),
                dist_sq=dist_sq,
                loss_gap=dist_sq,
                grad_norm_sq=4.0 * dist_sq,
                delta=delta,
            )
        theta = x.reshape(self.spec.n_classes, -1)
        acc = softmax_accuracy(theta, self.test_shard.samples, self.test_shard.labels)
        return RoundMetrics(
            round_index=round_index,
            method=label,
            val_loss=float(val_loss),
            accuracy=acc,
            delta=delta,
        )

    def grid_delta(self, objective: WeightObjective, w_returned: np.ndarray) -> float:
        """Solver gap against the brute-force simplex grid (small client counts)."""
        grid_best = min(objective.value(w) for w in self._grid)
        return max(objective.value(w_returned) - grid_best, 0.0)


def _method_weights(
    state: RunState,
    method_index: int,
    method: MethodConfig,
    gradients: np.ndarray,
    round_index: int,
) -> tuple[np.ndarray, Optional[float]]:
    spec = state.spec
    label = method.label
    if method.kind == KIND_MERITFED:
        md = dataclasses.replace(
            method.md, rng=streams.substream(spec.master_seed, streams.MD, method_index, round_index)
        )
        w, delta = weights_meritfed(
            state.points[label], gradients, method.model_step, md, state.oracle
        )
        if state.delta_estimator == DELTA_ESTIMATOR_GRID:
            objective = WeightObjective(
                x=state.points[label],
                gradients=gradients,
                model_step=method.model_step,
                loss_oracle=state.oracle,
            )
            delta = state.grid_delta(objective, w)
        return w, delta
    if method.kind == KIND_SGD_FULL:
        return weights_sgd_full(spec.n_clients), None
    if method.kind == KIND_SGD_IDEAL:
        return weights_sgd_ideal(method.ideal_indices, spec.n_clients), None
    if method.kind == KIND_FEDADP:
        w = weights_fedadp(
            gradients,
            target_index=0,
            state=state.method_states[label],
            alpha=method.fedadp_alpha,
            smoothing=method.fedadp_smoothing,
        )
        return w, None
    if method.kind == KIND_TAWT:
        w = weights_tawt(
            gradients,
            target_index=0,
            state=state.method_states[label],
            step=method.tawt_step,
            scale=method.tawt_scale,
            mode=method.tawt_mode,
        )
        return w, None
    if method.kind == KIND_FEDAVG:
        rng = streams.substream(spec.master_seed, streams.METHOD, method_index, round_index)
        return weights_fedavg_sampled(spec.n_clients, method.sample_count, rng), None
    raise ConfigError(f"unknown method kind {method.kind!r}")


def run_round(state: RunState, round_index: int, observer: Optional[Observer] = None) -> None:
    """One federated round: honest phase, collusion phase, per-method updates."""
    spec = state.spec
    n = spec.n_clients

    if spec.task == TASK_MEAN:
        basis = state.honest_gradient_basis(round_index)
    else:
        batch_rows = [state.batch_indices(i, round_index) for i in range(n)]

    noise_draws: dict[int, np.ndarray] = {}
    if spec.byzantine_count > 0 and spec.attack.kind == ATTACK_RANDOM_NOISE:
        for role in state.roles:
            if role.kind == "byzantine":
                rng = streams.substream(
                    spec.master_seed, streams.ATTACK_NOISE, role.index, round_index
                )
                noise_draws[role.index] = rng.standard_normal(state.model_dim)

    for method_index, method in enumerate(spec.methods):
        label = method.label
        x = state.points[label]

        # Phase 1: what every client would honestly send at this method's point.
        if spec.task == TASK_MEAN:
            honest = 2.0 * (x - basis)
        else:
            theta = x.reshape(spec.n_classes, -1)
            honest = np.empty((n, state.model_dim))
            for i in range(n):
                rows = batch_rows[i]
                _, grad = softmax_loss_grad(
                    theta, state.shards[i].samples[rows], state.shards[i].labels[rows]
                )
                honest[i] = grad.ravel()

        # Phase 2: colluding and corrupting attacks replace Byzantine messages.
        gradients = honest
        if spec.byzantine_count > 0:
            gradients = honest.copy()
            pool = [honest[i] for i in state.group1_indices]
            for idx, message in byzantine_messages(
                state.roles, honest, pool, noise_draws
            ).items():
                gradients[idx] = message

        GradientSet(vectors=gradients, round_index=round_index)  # finiteness check

        # Phase 3: weights, metrics at the pre-update point, model update.
        w, delta = _method_weights(state, method_index, method, gradients, round_index)
        w = check_weights(w, n=n)
        if delta is not None:
            state.delta_sums[label] += delta
        state.metrics.append(state.state_metrics(label, round_index, delta))
        if round_index % spec.weight_log_every == 0 or round_index == spec.rounds - 1:
            state.weight_rows.append((round_index, label, w.copy()))
        x_new = apply_update(x, gradients, w, method.model_step)
        if observer is not None:
            observer(round_index, label, x, gradients, w, delta, x_new)
        state.points[label] = x_new


def check_convergence_bounds(
    initial_gap: float,
    avg_grad_norm_sq: float,
    final_gap: float,
    rounds: int,
    model_step: float,
    group_size: int,
    sigma_sq: float,
    delta_bar: float,
    smoothness: float = MEAN_SMOOTHNESS,
    pl_constant: float = MEAN_PL_CONSTANT,
) -> dict:
    """Evaluate the two rate bounds against measured run quantities.

    The averaged-gradient bound is
    2*(f(x0)-f*)/(T*step) + 2*sigma^2*step*L/G + 2*delta_bar/step,
    compared with the measured (1/T) sum of squared true-gradient norms. The
    last-iterate bound under the quadratic growth (PL) condition is
    (1-step*mu)^T*(f(x0)-f*) + sigma^2*step*L/(mu*G) + delta_bar*T/(step*mu).
    """
    noncvx_rhs = (
        2.0 * initial_gap / (rounds * model_step)
        + 2.0 * sigma_sq * model_step * smoothness / group_size
        + 2.0 * delta_bar / model_step
    )
    pl_rhs = (
        (1.0 - model_step * pl_constant) ** rounds * initial_gap
        + sigma_sq * model_step * smoothness / (pl_constant * group_size)
        + delta_bar * rounds / (model_step * pl_constant)
    )
    tol = 1e-12
    return {
        "noncvx_rhs": noncvx_rhs,
        "noncvx_holds": bool(avg_grad_norm_sq <= noncvx_rhs * (1.0 + tol) + tol),
        "pl_rhs": pl_rhs,
        "pl_holds": bool(final_gap <= pl_rhs * (1.0 + tol) + tol),
        "step_size_ok": bool(model_step <= 1.0 / (2.0 * smoothness)),
    }


def _convergence_report(state: RunState) -> list[ConvergenceRow]:
    spec = state.spec
    if spec.task != TASK_MEAN:
        return []
    rows = []
    sigma_sq = 0.0 if spec.exact_gradients else 4.0 * spec.dim / spec.batch_size
    group_size = spec.group_counts[0]
    by_method: dict[str, list[RoundMetrics]] = {m.label: [] for m in spec.methods}
    for row in state.metrics:
        by_method[row.method].append(row)
    for method in spec.methods:
        history = sorted(by_method[method.label], key=lambda r: r.round_index)
        pre_update = history[: spec.rounds]
        initial_gap = pre_update[0].loss_gap
        avg_grad = float(np.mean([r.grad_norm_sq for r in pre_update]))
        final_gap = history[-1].loss_gap
        delta_bar = state.delta_sums[method.label] / spec.rounds
        bounds = check_convergence_bounds(
            initial_gap=initial_gap,
            avg_grad_norm_sq=avg_grad,
            final_gap=final_gap,
            rounds=spec.rounds,
            model_step=method.model_step,
            group_size=group_size,
            sigma_sq=sigma_sq,
            delta_bar=delta_bar,
        )
        applies = spec.byzantine_count == 0 or method.kind in (KIND_MERITFED, KIND_SGD_IDEAL)
        rows.append(
            ConvergenceRow(
                method=method.label,
                rounds=spec.rounds,
                group_size=group_size,
                sigma_sq=sigma_sq,
                delta_bar=delta_bar,
                delta_estimator=state.delta_estimator,
                initial_gap=initial_gap,
                avg_grad_norm_sq=avg_grad,
                noncvx_rhs=bounds["noncvx_rhs"],
                noncvx_holds=bounds["noncvx_holds"],
                final_gap=final_gap,
                pl_rhs=bounds["pl_rhs"],
                pl_holds=bounds["pl_holds"],
                step_size_ok=bounds["step_size_ok"],
                applies=applies,
            )
        )
    return rows


def run_experiment(
    spec: ExperimentSpec, observer: Optional[Observer] = None
) -> ExperimentResult:
    """Run all configured methods for the full horizon and collect outputs."""
    state = RunState(spec)
    for t in range(spec.rounds):
        run_round(state, t, observer=observer)
    for method in spec.methods:
        state.metrics.append(state.state_metrics(method.label, spec.rounds, None))
    return ExperimentResult(
        spec=spec,
        metrics=state.metrics,
        weight_rows=state.weight_rows,
        convergence=_convergence_report(state),
        mixture_direction=state.mixture_direction,
        final_points={label: x.copy() for label, x in state.points.items()},
        oracle=state.oracle,
        target_optimum=state.target_optimum,
        shards=state.shards,
    )
