"""Per-molecule reward assembly.

total = U_multi * bonus - lambda(episode) * diversity, where the bonus is a
weighted sum of validity/uniqueness/novelty flags, diversity is the mean
in-batch Tanimoto similarity, and the diversity weight decays exponentially
over episodes. Property cutoffs can track an exponential moving average of
generated-batch means, floored at the configured static cutoffs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .molgraph import tanimoto
from .uncertainty import ObjectiveSpec

DEFAULT_B_VALID = 0.2
DEFAULT_B_UNIQUE = 0.35
DEFAULT_B_NOVEL = 0.05
DEFAULT_LAMBDA0 = 0.1
DEFAULT_DECAY_RATE = 0.05
DEFAULT_EMA_MOMENTUM = 0.9


@dataclass(frozen=True)
class RewardConfig:
    b_valid: float = DEFAULT_B_VALID
    b_unique: float = DEFAULT_B_UNIQUE
    b_novel: float = DEFAULT_B_NOVEL
    lambda0: float = DEFAULT_LAMBDA0
    decay_rate: float = DEFAULT_DECAY_RATE
    cutoff_mode: str = "dynamic"
    ema_momentum: float = DEFAULT_EMA_MOMENTUM
    bonus_enabled: bool = True
    diversity_enabled: bool = True

    def __post_init__(self):
        if min(self.b_valid, self.b_unique, self.b_novel, self.lambda0, self.decay_rate) < 0:
            raise ConfigError("reward weights and decay must be nonnegative")
        if not (0.0 <= self.ema_momentum < 1.0):
            raise ConfigError(f"ema_momentum must lie in [0, 1), got {self.ema_momentum}")
        if self.cutoff_mode not in ("dynamic", "static"):
            raise ConfigError(f"cutoff_mode must be dynamic or static, got {self.cutoff_mode!r}")


@dataclass(frozen=True)
class RewardBreakdown:
    u_multi: float
    bonus: float
    diversity: float
    lam: float
    total: float


def bonus(valid: bool, unique: bool, novel: bool, cfg: RewardConfig) -> float:
    """Weighted flag sum; the bonus-off ablation degrades to a constant 1 multiplier."""
    if not cfg.bonus_enabled:
        return 1.0
    return cfg.b_valid * valid + cfg.b_unique * unique + cfg.b_novel * novel


def batch_diversity(fingerprints) -> list:
    """Mean Tanimoto similarity of each fingerprint to the rest of the batch."""
    n = len(fingerprints)
    if n < 1:
        raise ConfigError("batch_diversity needs at least one fingerprint")
    if n == 1:
        return [0.0]
    out = []
    for i, fp_i in enumerate(fingerprints):
        total = sum(tanimoto(fp_i, fp_j) for j, fp_j in enumerate(fingerprints) if j != i)
        out.append(total / (n - 1))
    return out


def lambda_at(episode: int, cfg: RewardConfig) -> float:
    if episode < 0:
        raise ConfigError(f"episode must be >= 0, got {episode}")
    if not cfg.diversity_enabled:
        return 0.0
    return cfg.lambda0 * math.exp(-cfg.decay_rate * episode)


def total_reward(u_multi: float, bonus_value: float, diversity: float,
                 lam: float) -> RewardBreakdown:
    return RewardBreakdown(u_multi, bonus_value, diversity, lam,
                           u_multi * bonus_value - lam * diversity)


@dataclass
class DynamicCutoffState:
    """Per-property EMA of generated-batch means, with floor cutoffs.

    The effective cutoff never relaxes past the floor: for higher-is-better
    properties it is max(ema, floor), for lower-is-better min(ema, floor).
    """

    specs: list
    ema: dict = field(default_factory=dict)

    def __post_init__(self):
        for spec in self.specs:
            self.ema.setdefault(spec.name, spec.cutoff)

    def effective_specs(self) -> list:
        out = []
        for spec in self.specs:
            value = self.ema[spec.name]
            cutoff = max(value, spec.cutoff) if spec.direction == 1 else min(value, spec.cutoff)
            out.append(replace(spec, cutoff=cutoff))
        return out


def update_cutoffs(state: DynamicCutoffState, batch_means: dict,
                   cfg: RewardConfig) -> DynamicCutoffState:
    """EMA update per property; a no-op in static mode."""
    if cfg.cutoff_mode == "static":
        return state
    m = cfg.ema_momentum
    for spec in state.specs:
        if spec.name in batch_means:
            state.ema[spec.name] = m * state.ema[spec.name] + (1.0 - m) * batch_means[spec.name]
    return state
