"""Forward noising, conditional reverse sampling and transition densities.

The reverse update is
``z_s = z_t / a_ts - (var_ts / (a_ts * sigma_t)) * eps_hat + sigma_tts * eps``
with ``(a_ts, var_ts, sigma_tts)`` from the schedule and the coordinate noise
CoG-projected at every step, so each sampled state stays in the zero-CoG
subspace. Densities are evaluated over that subspace: the coordinate block
contributes (M-1)*3 dimensions, the feature block M*d_h.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserParams, LatentState, predict_noise, predict_noise_batch
from .errors import ConfigError, NumericError, OrderingError
from .molgraph import AtomVocabulary, MolecularConfig, project_to_zero_cog
from .schedule import NoiseSchedule


def one_hot(atom_types, vocab: AtomVocabulary) -> np.ndarray:
    h = np.zeros((len(atom_types), len(vocab)))
    for i, s in enumerate(atom_types):
        h[i, vocab.index(s)] = 1.0
    return h


def sample_cog_noise(m: int, rng) -> np.ndarray:
    """Standard normal on the zero-CoG subspace (projected ambient draw)."""
    eps = rng.standard_normal((m, 3))
    return eps - eps.mean(axis=0, keepdims=True)


def forward_noise(config: MolecularConfig, t: int, schedule: NoiseSchedule, rng,
                  vocab: AtomVocabulary):
    """Noise a data point to timestep t: returns (LatentState, (eps_x, eps_h))."""
    if not (1 <= t <= schedule.T):
        raise OrderingError(f"t must lie in 1..T, got {t}")
    x = config.coords
    h = one_hot(config.atom_types, vocab)
    eps_x = sample_cog_noise(config.n_atoms, rng)
    eps_h = rng.standard_normal(h.shape)
    alpha, sigma = schedule.alpha[t], schedule.sigma[t]
    state = LatentState(alpha * x + sigma * eps_x, alpha * h + sigma * eps_h,
                        t, t / schedule.T, config.condition)
    return state, (eps_x, eps_h)


def data_estimate(state: LatentState, eps_x: np.ndarray, eps_h: np.ndarray,
                  schedule: NoiseSchedule):
    """Invert the forward map given the noise: [x, h] = z/alpha - (sigma/alpha) eps."""
    alpha, sigma = schedule.alpha[state.t], schedule.sigma[state.t]
    return (state.z_x / alpha - (sigma / alpha) * eps_x,
            state.z_h / alpha - (sigma / alpha) * eps_h)


def reverse_mean(state: LatentState, eps_x_hat, eps_h_hat, schedule: NoiseSchedule,
                 s_idx: int):
    """Deterministic part of the reverse transition t -> s."""
    alpha_ts, var_ts, _ = schedule.step_ratios(state.t, s_idx)
    sigma_t = schedule.sigma[state.t]
    coef = var_ts / (alpha_ts * sigma_t)
    mu_x = state.z_x / alpha_ts - coef * eps_x_hat
    mu_h = state.z_h / alpha_ts - coef * eps_h_hat
    return mu_x, mu_h


def reverse_step(params: DenoiserParams, state: LatentState, s_idx: int,
                 schedule: NoiseSchedule, rng):
    """One stochastic reverse step; returns (z_s state, (mu_x, mu_h), step variance)."""
    if s_idx != state.t - 1:
        raise OrderingError(f"reverse step needs s = t - 1, got t={state.t}, s={s_idx}")
    _, _, sigma_tts = schedule.step_ratios(state.t, s_idx)
    eps_x_hat, eps_h_hat = predict_noise(params, state)
    mu_x, mu_h = reverse_mean(state, eps_x_hat, eps_h_hat, schedule, s_idx)
    noise_x = sample_cog_noise(state.n_atoms, rng)
    noise_h = rng.standard_normal(state.z_h.shape)
    z_s = LatentState(mu_x + sigma_tts * noise_x, mu_h + sigma_tts * noise_h,
                      s_idx, s_idx / schedule.T, state.condition)
    return z_s, (mu_x, mu_h), sigma_tts**2


@dataclass
class Trajectory:
    """Recorded denoising chain z_T..z_0 with per-step means and variances."""

    states: list       # T+1 LatentStates, index 0 is z_T, index T is z_0
    means: list        # T (mu_x, mu_h) pairs; means[k] generated states[k+1]
    step_variances: list  # T floats, sigma_{t->s}^2 per transition
    condition: np.ndarray
    n_atoms: int

    def state_at(self, t: int) -> LatentState:
        """State z_t (t counts down from T at index 0)."""
        return self.states[len(self.states) - 1 - t]

    def transition(self, t: int):
        """(z_t, z_{t-1}, (mu_x, mu_h), variance) for the step t -> t-1."""
        k = len(self.states) - 1 - t
        return self.states[k], self.states[k + 1], self.means[k], self.step_variances[k]


def sample_molecule(params: DenoiserParams, condition, n_atoms: int,
                    schedule: NoiseSchedule, rng, record: bool = False):
    """Run the reverse chain from pure noise; optionally record the trajectory."""
    if n_atoms < 1:
        raise ConfigError(f"n_atoms must be >= 1, got {n_atoms}")
    condition = np.asarray(condition, dtype=np.float64).reshape(-1)
    z = LatentState(sample_cog_noise(n_atoms, rng),
                    rng.standard_normal((n_atoms, len(params.vocab))),
                    schedule.T, 1.0, condition)
    states = [z] if record else None
    means = [] if record else None
    variances = [] if record else None
    for t in range(schedule.T, 0, -1):
        z, mu, var = reverse_step(params, z, t - 1, schedule, rng)
        if record:
            states.append(z)
            means.append(mu)
            variances.append(var)
    symbols = [params.vocab.symbols[i] for i in np.argmax(z.z_h, axis=1)]
    config = MolecularConfig.create(symbols, project_to_zero_cog(z.z_x), condition)
    trajectory = None
    if record:
        trajectory = Trajectory(states, means, variances, condition, n_atoms)
    return config, trajectory


def sample_batch(params: DenoiserParams, draws, schedule: NoiseSchedule, rng,
                 record: bool = False):
    """Sample many molecules in timestep lockstep (one batched forward per step).

    ``draws`` is a list of (condition, n_atoms). Equivalent to repeated
    ``sample_molecule`` up to the RNG consumption order; per-molecule chains
    remain independent.
    """
    states = []
    for condition, m in draws:
        condition = np.asarray(condition, dtype=np.float64).reshape(-1)
        if m < 1:
            raise ConfigError(f"n_atoms must be >= 1, got {m}")
        states.append(LatentState(sample_cog_noise(m, rng),
                                  rng.standard_normal((m, len(params.vocab))),
                                  schedule.T, 1.0, condition))
    n = len(states)
    trajectories = None
    if record:
        trajectories = [Trajectory([s], [], [], s.condition, s.n_atoms) for s in states]
    for t in range(schedule.T, 0, -1):
        s_idx = t - 1
        _, _, sigma_tts = schedule.step_ratios(t, s_idx)
        eps_hats = predict_noise_batch(params, states)
        next_states = []
        for k in range(n):
            mu_x, mu_h = reverse_mean(states[k], eps_hats[k][0], eps_hats[k][1],
                                      schedule, s_idx)
            noise_x = sample_cog_noise(states[k].n_atoms, rng)
            noise_h = rng.standard_normal(states[k].z_h.shape)
            z_s = LatentState(mu_x + sigma_tts * noise_x, mu_h + sigma_tts * noise_h,
                              s_idx, s_idx / schedule.T, states[k].condition)
            next_states.append(z_s)
            if record:
                trajectories[k].states.append(z_s)
                trajectories[k].means.append((mu_x, mu_h))
                trajectories[k].step_variances.append(sigma_tts**2)
        states = next_states
    molecules = []
    for k, z in enumerate(states):
        symbols = [params.vocab.symbols[i] for i in np.argmax(z.z_h, axis=1)]
        molecules.append(MolecularConfig.create(symbols, project_to_zero_cog(z.z_x),
                                                z.condition))
    return molecules, trajectories


def density_dim(n_atoms: int, d_h: int, d_x: int = 3) -> int:
    """Effective dimension: zero-CoG coordinate subspace + feature block."""
    return (n_atoms - 1) * d_x + n_atoms * d_h


def log_density_terms(z_prev, mu, variance: float, d: int):
    """Isotropic Gaussian log-density; generic over ndarray / autodiff Tensor."""
    dx = mu[0] - z_prev[0]
    dh = mu[1] - z_prev[1]
    sq = (dx * dx).sum() + (dh * dh).sum()
    return (-0.5 * d * math.log(2.0 * math.pi * variance)) - sq / (2.0 * variance)


def transition_log_density(z_prev, mu, variance: float, d_x: int = 3,
                           d_h: int | None = None) -> float:
    """log p(z_prev | mu, variance I) over the subspace-aware dimension."""
    if variance <= 0 or not np.isfinite(variance):
        raise NumericError(f"transition variance must be positive, got {variance}")
    zx, zh = z_prev
    if d_h is None:
        d_h = zh.shape[1]
    d = density_dim(zx.shape[0], d_h, d_x)
    return float(log_density_terms((zx, zh), mu, variance, d))


def trajectory_log_density(trajectory: Trajectory) -> float:
    """Total log-density of a recorded chain under its recording parameters."""
    total = 0.0
    for k in range(len(trajectory.means)):
        z_next = trajectory.states[k + 1]
        total += transition_log_density((z_next.z_x, z_next.z_h), trajectory.means[k],
                                        trajectory.step_variances[k])
    return total


# ---------------------------------------------------------------------------
# Empirical (condition, size) distribution
# ---------------------------------------------------------------------------

N_CONDITION_BINS = 16


class ConditionSizeDistribution:
    """Joint empirical histogram over (binned condition vector, atom count)."""

    def __init__(self, cells, probs, lo, hi):
        self.cells = cells  # list of (mean_condition, n_atoms)
        self.probs = probs
        self.lo = lo
        self.hi = hi

    def draw(self, rng):
        idx = rng.choice(len(self.cells), p=self.probs)
        condition, n_atoms = self.cells[idx]
        return condition.copy(), n_atoms


def fit_condition_size(split) -> ConditionSizeDistribution:
    if not split:
        raise ConfigError("cannot fit a (condition, size) distribution on an empty split")
    conditions = np.array([c.condition for c in split], dtype=np.float64)
    if not np.all(np.isfinite(conditions)):
        raise ConfigError("split has molecules with missing property annotations")
    sizes = [c.n_atoms for c in split]
    k = conditions.shape[1]
    lo = conditions.min(axis=0) if k else np.zeros(0)
    hi = conditions.max(axis=0) if k else np.zeros(0)
    span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    buckets: dict = {}
    for cond, m in zip(conditions, sizes):
        idx = tuple(np.minimum((cond - lo) / span * N_CONDITION_BINS,
                               N_CONDITION_BINS - 1).astype(int)) if k else ()
        key = (idx, m)
        entry = buckets.setdefault(key, [0, np.zeros(k)])
        entry[0] += 1
        entry[1] = entry[1] + cond
    n = len(split)
    cells = []
    probs = []
    for key in sorted(buckets):
        count, total = buckets[key]
        cells.append((total / count, key[1]))
        probs.append(count / n)
    return ConditionSizeDistribution(cells, np.array(probs), lo, hi)


# ---------------------------------------------------------------------------
# Debug trajectory dump (same encoding family as checkpoints)
# ---------------------------------------------------------------------------

TRAJECTORY_MAGIC = b"MOLRLTRAJ1\n"


def dump_trajectory(path, trajectory: Trajectory):
    arrays = []
    for k, state in enumerate(trajectory.states):
        arrays.append((f"state{k}.z_x", state.z_x))
        arrays.append((f"state{k}.z_h", state.z_h))
    for k, (mu_x, mu_h) in enumerate(trajectory.means):
        arrays.append((f"mean{k}.x", mu_x))
        arrays.append((f"mean{k}.h", mu_h))
    header = {
        "format_version": 1,
        "n_atoms": trajectory.n_atoms,
        "n_states": len(trajectory.states),
        "condition": [float(v) for v in trajectory.condition],
        "step_variances": [float(v) for v in trajectory.step_variances],
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TRAJECTORY_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
