"""RL fine-tuning loop with a clipped surrogate objective.

Each episode freezes the current policy, samples full denoising
trajectories, scores terminal molecules (threshold probabilities, quality
bonus, diversity penalty) and then runs ``reuse`` inner epochs: sample K
timesteps, re-evaluate per-step transition log-densities under the live
parameters, form per-(trajectory, timestep) ratios against the recorded
frozen log-densities, and descend the negated clipped surrogate. The
terminal reward is broadcast undiscounted to every sampled timestep of its
trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import metrics as mx
from . import reward as rw
from .autodiff import Tensor, minimum, no_grad
from .errors import ConfigError, NumericError
from .molgraph import canonical_hash, fingerprint, infer_bonds, is_valid
from .uncertainty import multi_objective_prob


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 3e-4
    learning_rate: float = 1e-5
    reuse: int = 3
    n_samples: int = 128
    k_timesteps: int = 8
    episodes: int = 30
    grad_accum_batches: int = 4

    def __post_init__(self):
        if self.clip_eps <= 0 or self.learning_rate <= 0:
            raise ConfigError("clip_eps and learning_rate must be positive")
        if min(self.reuse, self.n_samples, self.k_timesteps, self.grad_accum_batches) < 1:
            raise ConfigError("reuse, n_samples, k_timesteps, grad_accum_batches must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")


@dataclass
class EpisodeBatch:
    trajectories: list
    molecules: list
    flags: list          # (valid, unique, novel) per molecule
    rewards: list        # RewardBreakdown per molecule
    old_logp: np.ndarray  # (n_samples, T); column t-1 holds the step t -> t-1
    property_means: dict  # batch mean oracle prediction per property


def collect_episode(params_old, schedule, cond_dist, oracle, objective_specs,
                    reward_cfg: rw.RewardConfig, episode: int, train_hashes,
                    n_samples: int, rng) -> EpisodeBatch:
    """Sample n trajectories under frozen parameters and attach rewards."""
    draws = [cond_dist.draw(rng) for _ in range(n_samples)]
    molecules, trajectories = df.sample_batch(params_old, draws, schedule, rng,
                                              record=True)
    vocab = params_old.vocab
    valid = [is_valid(c, vocab) for c in molecules]
    hashes = [canonical_hash(infer_bonds(c, vocab)) for c in molecules]
    seen = set()
    flags = []
    for v, h in zip(valid, hashes):
        unique = bool(v and h not in seen)
        if v:
            seen.add(h)
        novel = bool(v and h not in train_hashes)
        flags.append((v, unique, novel))
    fingerprints = [fingerprint(infer_bonds(c, vocab)) for c in molecules]
    diversity = rw.batch_diversity(fingerprints)
    lam = rw.lambda_at(episode, reward_cfg)
    estimates = [oracle.predict(c) for c in molecules]
    rewards = []
    for i, config in enumerate(molecules):
        ests = [estimates[i][spec.name] for spec in objective_specs]
        u_multi = multi_objective_prob(ests, objective_specs)
        b = rw.bonus(*flags[i], reward_cfg)
        rewards.append(rw.total_reward(u_multi, b, diversity[i], lam))
    property_means = {}
    for spec in objective_specs:
        property_means[spec.name] = float(
            np.mean([estimates[i][spec.name].mean for i in range(n_samples)]))
    old_logp = np.empty((n_samples, schedule.T))
    for i, trajectory in enumerate(trajectories):
        for t in range(1, schedule.T + 1):
            _, z_prev, mu, variance = trajectory.transition(t)
            old_logp[i, t - 1] = df.transition_log_density(
                (z_prev.z_x, z_prev.z_h), mu, variance)
    if not np.all(np.isfinite(old_logp)):
        raise NumericError("frozen-policy log-densities contain non-finite values")
    return EpisodeBatch(trajectories, molecules, flags, rewards, old_logp, property_means)


def clipped_loss_t(pt: dict, params, batch: EpisodeBatch, timesteps, clip_eps: float,
                   schedule, traj_indices=None) -> Tensor:
    """Taped clipped surrogate loss over (trajectory, timestep) pairs.

    All pairs are evaluated in one padded graph batch; the molecule's total
    reward is broadcast to each of its sampled timesteps.
    """
    indices = (list(range(len(batch.trajectories))) if traj_indices is None
               else list(traj_indices))
    if not indices or not timesteps:
        raise ConfigError("clipped loss needs at least one trajectory and timestep")
    for t in timesteps:
        if not (1 <= t <= schedule.T):
            raise ConfigError(f"sampled timestep {t} outside 1..{schedule.T}")
    pairs = [(i, t) for i in indices for t in timesteps]
    z_ts = []
    per_pair = []
    for i, t in pairs:
        trajectory = batch.trajectories[i]
        z_t, z_prev, _, variance = trajectory.transition(t)
        alpha_ts, var_ts, _ = schedule.step_ratios(t, t - 1)
        coef = var_ts / (alpha_ts * schedule.sigma[t])
        d = df.density_dim(z_t.n_atoms, z_t.z_h.shape[1])
        per_pair.append((z_t, z_prev, variance, alpha_ts, coef, d))
        z_ts.append(z_t)
    gb = dn.GraphBatch(z_ts, params)
    px, ph = dn._forward_batch(pt, params, gb)
    b, m = gb.z_x.shape[:2]
    v = params.vocab_size
    zx_raw = np.zeros((b, m, 3))
    zh_raw = np.zeros((b, m, v))
    zx_prev = np.zeros((b, m, 3))
    zh_prev = np.zeros((b, m, v))
    alpha_vec = np.empty((b, 1, 1))
    coef_vec = np.empty((b, 1, 1))
    var_vec = np.empty(b)
    const_vec = np.empty(b)
    for k, (z_t, z_prev, variance, alpha_ts, coef, d) in enumerate(per_pair):
        n = z_t.n_atoms
        zx_raw[k, :n] = z_t.z_x
        zh_raw[k, :n] = z_t.z_h
        zx_prev[k, :n] = z_prev.z_x
        zh_prev[k, :n] = z_prev.z_h
        alpha_vec[k] = alpha_ts
        coef_vec[k] = coef
        var_vec[k] = variance
        const_vec[k] = -0.5 * d * np.log(2.0 * np.pi * variance)
    mu_x = zx_raw / alpha_vec - coef_vec * px
    mu_h = zh_raw / alpha_vec - coef_vec * ph
    dx = (mu_x - zx_prev) * gb.node_mask
    dh = (mu_h - zh_prev) * gb.node_mask
    sq = (dx * dx).sum(axis=2).sum(axis=1) + (dh * dh).sum(axis=2).sum(axis=1)
    logp_new = const_vec - sq / (2.0 * var_vec)
    logp_old = np.array([batch.old_logp[i, t - 1] for i, t in pairs])
    ratio = (logp_new - logp_old).exp()
    bad = np.nonzero(~np.isfinite(ratio.data))[0]
    if bad.size:
        i, t = pairs[int(bad[0])]
        raise NumericError(f"non-finite ratio for trajectory {i}, timestep {t}")
    rewards = np.array([batch.rewards[i].total for i, t in pairs])
    term = minimum(ratio * rewards, ratio.clip(1.0 - clip_eps, 1.0 + clip_eps) * rewards)
    return -term.mean()


def clipped_loss(params, batch: EpisodeBatch, timesteps, clip_eps: float,
                 schedule) -> float:
    with no_grad():
        loss = clipped_loss_t(dn.wrap_params(params), params, batch, timesteps,
                              clip_eps, schedule)
    return float(loss.data)


def lr_at(update_idx: int, total_updates: int, lr0: float) -> float:
    """Linear decay to 10% of the base rate across all inner updates."""
    if total_updates <= 1:
        return lr0
    frac = min(update_idx, total_updates - 1) / (total_updates - 1)
    return lr0 * (1.0 - 0.9 * frac)


@dataclass
class TrainHooks:
    """Optional side-effect callbacks, called once per episode."""

    on_episode: callable = None   # (episode_index, log_row, reward_rows) -> None
    on_checkpoint: callable = None  # (episode_index, params, adam_state, rng) -> None


def train(params, cfg: PpoConfig, reward_cfg: rw.RewardConfig, schedule, oracle,
          objective_specs, cond_dist, train_hashes, rng,
          cutoff_state: rw.DynamicCutoffState | None = None,
          adam_state: dn.AdamState | None = None, start_episode: int = 0,
          hooks: TrainHooks | None = None):
    """Run the full RL loop; returns (params, episode log rows)."""
    if cutoff_state is None:
        cutoff_state = rw.DynamicCutoffState(list(objective_specs))
    if adam_state is None:
        adam_state = dn.AdamState(params)
    hooks = hooks or TrainHooks()
    total_updates = cfg.episodes * cfg.reuse
    log_rows = []
    for episode in range(start_episode, cfg.episodes):
        params_old = params.copy()
        effective = cutoff_state.effective_specs()
        batch = collect_episode(params_old, schedule, cond_dist, oracle, effective,
                                reward_cfg, episode, train_hashes, cfg.n_samples, rng)
        report = mx.evaluate(batch.molecules, train_hashes, oracle, objective_specs,
                             params.vocab)
        row = {
            "episode": episode,
            "mean_reward": float(np.mean([r.total for r in batch.rewards])),
            "validity": report.validity,
            "uniqueness": report.uniqueness,
            "novelty": report.novelty,
            "atom_stability": report.atom_stability,
            "mol_stability": report.mol_stability,
            "mean_u_multi": float(np.mean([r.u_multi for r in batch.rewards])),
            "mean_bonus": float(np.mean([r.bonus for r in batch.rewards])),
            "mean_diversity": float(np.mean([r.diversity for r in batch.rewards])),
            "lambda": rw.lambda_at(episode, reward_cfg),
        }
        for spec in effective:
            row[f"cutoff_{spec.name}"] = spec.cutoff
        log_rows.append(row)
        rw.update_cutoffs(cutoff_state, batch.property_means, reward_cfg)
        n = len(batch.trajectories)
        chunk = max(1, -(-n // cfg.grad_accum_batches))  # ceil division
        for inner in range(cfg.reuse):
            timesteps = [int(t) for t in rng.integers(1, schedule.T + 1,
                                                      size=cfg.k_timesteps)]
            grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
            for lo in range(0, n, chunk):
                indices = range(lo, min(lo + chunk, n))
                weight = len(indices) / n

                def closure(pt, indices=indices):
                    return clipped_loss_t(pt, params, batch, timesteps, cfg.clip_eps,
                                          schedule, indices)

                part = dn.grad(params, closure)
                for k in grads:
                    grads[k] += weight * part[k]
            update_idx = episode * cfg.reuse + inner
            dn.adam_step(params, grads, adam_state, lr_at(update_idx, total_updates,
                                                          cfg.learning_rate))
        if hooks.on_episode:
            hooks.on_episode(episode, row, batch.rewards)
        if hooks.on_checkpoint:
            hooks.on_checkpoint(episode, params, adam_state, rng)
    return params, log_rows
