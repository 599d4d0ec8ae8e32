"""Precomputed noise-schedule tables.

The signal coefficient follows the polynomial
``alpha_t = (1 - 2s) * (1 - (t/T)^2) + s`` applied to alpha itself (the
literal text convention; switching to alpha^2 would change only
``build_schedule``), with the variance-preserving complement
``sigma_t = sqrt(1 - alpha_t^2)``. All tables are dense float64, built once.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, OrderingError

SIGMA_FLOOR = 1e-6
ALPHA_FLOOR = 1e-6
DEFAULT_S = 1e-5


class NoiseSchedule:
    """Tables alpha_t, sigma_t, SNR(t) and gamma(t) for t = 0..T."""

    def __init__(self, T: int, s: float, alpha: np.ndarray, sigma: np.ndarray):
        self.T = T
        self.s = s
        self.alpha = alpha
        self.sigma = sigma
        self._snr = alpha**2 / sigma**2
        self.gamma_table = -np.log(self._snr)

    def snr(self, t: int) -> float:
        return float(self._snr[t])

    def gamma(self, t: int) -> float:
        return float(self.gamma_table[t])

    def step_ratios(self, t: int, s_idx: int):
        """(alpha_{t|s}, sigma_{t|s}^2, sigma_{t->s}) for a reverse step t -> s."""
        if not (0 <= s_idx < t <= self.T):
            raise OrderingError(f"need 0 <= s < t <= T, got s={s_idx}, t={t}, T={self.T}")
        alpha_ts = self.alpha[t] / self.alpha[s_idx]
        var_ts = self.sigma[t]**2 - alpha_ts**2 * self.sigma[s_idx]**2
        var_ts = max(var_ts, 0.0)
        sigma_t_to_s = np.sqrt(var_ts) * self.sigma[s_idx] / self.sigma[t]
        return float(alpha_ts), float(var_ts), float(sigma_t_to_s)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,alpha,sigma,gamma\n")
            for t in range(self.T + 1):
                fh.write(f"{t},{self.alpha[t]!r},{self.sigma[t]!r},{self.gamma_table[t]!r}\n")


def build_schedule(T: int, s: float = DEFAULT_S) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < s < 0.5):
        raise ConfigError(f"s must lie in (0, 0.5), got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    alpha = (1.0 - 2.0 * s) * (1.0 - (t / T) ** 2) + s
    alpha = np.maximum(alpha, ALPHA_FLOOR)
    sigma = np.sqrt(np.maximum(1.0 - alpha**2, 0.0))
    sigma = np.maximum(sigma, SIGMA_FLOOR)
    return NoiseSchedule(T, s, alpha, sigma)
