"""Per-round client messages: honest stochastic gradients and attacks.

Honest clients sample a batch from their shard and send the task gradient.
Byzantine clients either corrupt their own honestly computed gradient
(bit-flip, random-noise) or collude using the round's honest messages
(inner-product manipulation, mean-shift). Collusion rules run once per round
after all honest messages exist; the engine enforces that two-phase order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AttackInputError, ConfigError, NumericInputError
from .tasks import DatasetShard, mean_grad

ATTACK_BIT_FLIP = "bit-flip"
ATTACK_RANDOM_NOISE = "random-noise"
ATTACK_IPM = "ipm"
ATTACK_ALIE = "alie"

ATTACK_KINDS = (ATTACK_BIT_FLIP, ATTACK_RANDOM_NOISE, ATTACK_IPM, ATTACK_ALIE)


@dataclass
class AttackSpec:
    """Byzantine behavior and its parameters."""

    kind: str
    sigma: float = 1.0  # random-noise scale
    epsilon: float = 0.1  # inner-product manipulation scale
    z: float = 100.0  # mean-shift multiplier in standard deviations
    shift_sign: int = -1  # mean-shift direction; -1 shifts against the mean

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.sigma < 0.0:
            raise ConfigError(f"noise scale must be >= 0, got {self.sigma}")
        if self.epsilon <= 0.0:
            raise ConfigError(f"manipulation scale must be > 0, got {self.epsilon}")
        if self.z <= 0.0:
            raise ConfigError(f"shift multiplier must be > 0, got {self.z}")
        if self.shift_sign not in (-1, 1):
            raise ConfigError(f"shift sign must be -1 or 1, got {self.shift_sign}")


@dataclass
class ClientRole:
    """One client's identity: honest group member or Byzantine attacker."""

    index: int
    kind: str  # "honest" or "byzantine"
    group_id: int = 0
    attack: Optional[AttackSpec] = None

    def __post_init__(self) -> None:
        if self.kind not in ("honest", "byzantine"):
            raise ConfigError(f"unknown client kind {self.kind!r}")
        if self.kind == "byzantine" and self.attack is None:
            raise ConfigError(f"byzantine client {self.index} needs an attack spec")


@dataclass
class GradientSet:
    """All client messages of one round, in client-index order."""

    vectors: np.ndarray  # (n, d)
    round_index: int

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=float)
        if not np.all(np.isfinite(self.vectors)):
            raise NumericInputError(f"round {self.round_index}: non-finite client message")


def honest_message(
    role: ClientRole,
    x: np.ndarray,
    shard: DatasetShard,
    batch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mean-task stochastic gradient on a uniform without-replacement batch."""
    if batch_size == 0:
        raise ConfigError(f"client {role.index}: batch size must be positive")
    if batch_size > shard.count:
        raise ConfigError(
            f"client {role.index}: batch size {batch_size} exceeds shard size {shard.count}"
        )
    if batch_size == shard.count:
        return mean_grad(x, shard.samples)
    idx = rng.choice(shard.count, size=batch_size, replace=False)
    return mean_grad(x, shard.samples[idx])


def attack_bf(g_honest_self: np.ndarray) -> np.ndarray:
    """Sign flip: send the negated honestly computed gradient."""
    return -np.asarray(g_honest_self, dtype=float)


def attack_rn(g_honest_self: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise on the honestly computed gradient."""
    if sigma < 0.0:
        raise ConfigError(f"noise scale must be >= 0, got {sigma}")
    g = np.asarray(g_honest_self, dtype=float)
    return g + sigma * rng.standard_normal(g.shape)


def attack_ipm(honest_gradients: list[np.ndarray], epsilon: float) -> np.ndarray:
    """Inner-product manipulation: the scaled negative honest mean.

    Every colluding worker sends the identical vector -epsilon * mean(honest).
    """
    if len(honest_gradients) == 0:
        raise AttackInputError("inner-product manipulation needs at least one honest gradient")
    return -epsilon * np.mean(np.asarray(honest_gradients, dtype=float), axis=0)


def attack_alie(honest_gradients: list[np.ndarray], z: float, shift_sign: int = -1) -> np.ndarray:
    """Mean-shift collusion: honest mean shifted by z sample standard deviations.

    Per coordinate the colluders send mean + shift_sign * z * std, with the
    sample standard deviation (ddof=1) over the honest set.
    """
    if len(honest_gradients) < 2:
        raise AttackInputError("mean-shift collusion needs at least two honest gradients")
    stacked = np.asarray(honest_gradients, dtype=float)
    return stacked.mean(axis=0) + shift_sign * z * stacked.std(axis=0, ddof=1)


def byzantine_messages(
    roles: list[ClientRole],
    honest_self_gradients: np.ndarray,
    collusion_pool: list[np.ndarray],
    noise_draws: dict[int, np.ndarray],
) -> dict[int, np.ndarray]:
    """Phase-two messages for every Byzantine client.

    honest_self_gradients holds what each client would honestly send (used by
    the self-corrupting attacks); collusion_pool holds the honest gradients
    visible to colluders; noise_draws maps Byzantine client index to its
    pre-drawn standard-normal vector for the random-noise attack.
    """
    out: dict[int, np.ndarray] = {}
    collusion_cache: dict[str, np.ndarray] = {}
    for role in roles:
        if role.kind != "byzantine":
            continue
        attack = role.attack
        if attack.kind == ATTACK_BIT_FLIP:
            out[role.index] = attack_bf(honest_self_gradients[role.index])
        elif attack.kind == ATTACK_RANDOM_NOISE:
            g = np.asarray(honest_self_gradients[role.index], dtype=float)
            out[role.index] = g + attack.sigma * noise_draws[role.index]
        elif attack.kind == ATTACK_IPM:
            if attack.kind not in collusion_cache:
                collusion_cache[attack.kind] = attack_ipm(collusion_pool, attack.epsilon)
            out[role.index] = collusion_cache[attack.kind]
        else:
            if attack.kind not in collusion_cache:
                collusion_cache[attack.kind] = attack_alie(
                    collusion_pool, attack.z, attack.shift_sign
                )
            out[role.index] = collusion_cache[attack.kind]
    return out
