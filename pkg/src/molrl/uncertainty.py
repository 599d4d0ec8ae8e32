"""Property oracles with predictive uncertainty and calibration metrics.

Uncertainty enters the reward as a threshold probability: a property with
predictive mean mu and total variance (aleatoric + epistemic) clears its
cutoff delta with probability 1 - Phi((delta - mu) / sigma) when higher
values are preferred, Phi((delta - mu) / sigma) when lower values are
preferred. Multi-objective aggregation is the product over properties
(pairwise correlations are weak enough to treat them as independent).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateDataError, DomainError
from .molgraph import (AtomVocabulary, MolecularConfig, canonical_hash, infer_bonds,
                       is_connected)

SIGMA_FLOOR = 1e-6


def normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


@dataclass(frozen=True)
class PropertyEstimate:
    """Predictive mean plus aleatoric/epistemic variance split."""

    mean: float
    var_aleatoric: float
    var_epistemic: float

    @property
    def total_variance(self) -> float:
        return max(self.var_aleatoric + self.var_epistemic, SIGMA_FLOOR**2)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.total_variance)


@dataclass(frozen=True)
class NigParams:
    """Normal Inverse-Gamma evidential output (gamma_mean, nu, alpha, beta)."""

    gamma_mean: float
    nu: float
    alpha: float
    beta: float


def nig_to_estimate(nig: NigParams) -> PropertyEstimate:
    """Variance split: aleatoric beta/(alpha-1), epistemic beta/(nu (alpha-1))."""
    if nig.alpha <= 1.0:
        raise DomainError(f"NIG alpha must exceed 1, got {nig.alpha}")
    if nig.nu <= 0.0 or nig.beta <= 0.0:
        raise DomainError(f"NIG nu and beta must be positive, got nu={nig.nu}, beta={nig.beta}")
    denom = nig.alpha - 1.0
    return PropertyEstimate(nig.gamma_mean, nig.beta / denom, nig.beta / (nig.nu * denom))


@dataclass(frozen=True)
class ObjectiveSpec:
    """Target for one property: direction +1 (higher better) or -1 (lower better)."""

    name: str
    direction: int
    cutoff: float

    def __post_init__(self):
        if self.direction not in (1, -1):
            raise ConfigError(f"direction must be +1 or -1, got {self.direction}")

    def satisfied(self, value: float) -> bool:
        return value >= self.cutoff if self.direction == 1 else value <= self.cutoff


def single_objective_prob(est: PropertyEstimate, spec: ObjectiveSpec) -> float:
    """P(X >= cutoff) for direction +1, P(X <= cutoff) for -1, X ~ N(mean, total var)."""
    z = (spec.cutoff - est.mean) / max(est.sigma, SIGMA_FLOOR)
    cdf = normal_cdf(z)
    return 1.0 - cdf if spec.direction == 1 else cdf


def multi_objective_prob(ests, specs) -> float:
    if len(ests) != len(specs) or not ests:
        raise ConfigError(f"need matching nonempty estimates/specs, got {len(ests)}/{len(specs)}")
    prob = 1.0
    for est, spec in zip(ests, specs):
        prob *= single_objective_prob(est, spec)
    return prob


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

class SyntheticOracle:
    """Built-in geometry/graph-based property stand-ins.

    pseudo_qed   = logistic(2 * heteroatom fraction - 0.5), in (0, 1), higher better
    pseudo_sas   = 1 + ring count + 0.5 * mean degree, lower better
    pseudo_affinity = -radius of gyration (Angstrom), lower better
    """

    property_names = ("pseudo_qed", "pseudo_sas", "pseudo_affinity")
    directions = {"pseudo_qed": 1, "pseudo_sas": -1, "pseudo_affinity": -1}

    def __init__(self, vocab: AtomVocabulary, aleatoric_var=None, epistemic_coeff=0.1):
        self.vocab = vocab
        self.aleatoric_var = dict(aleatoric_var) if aleatoric_var else {
            "pseudo_qed": 0.01, "pseudo_sas": 0.25, "pseudo_affinity": 0.25}
        self.epistemic_coeff = epistemic_coeff

    def predict(self, config: MolecularConfig) -> dict:
        m = config.n_atoms
        graph = infer_bonds(config, self.vocab)
        hetero = sum(1 for s in config.atom_types if s != "C") / m
        n_edges = len(graph.edges)
        components = _n_components(graph)
        rings = n_edges - m + components
        mean_degree = 2.0 * n_edges / m
        centered = config.coords - config.coords.mean(axis=0, keepdims=True)
        gyration = math.sqrt(float((centered**2).sum(axis=1).mean()))
        values = {
            "pseudo_qed": logistic(2.0 * hetero - 0.5),
            "pseudo_sas": 1.0 + rings + 0.5 * mean_degree,
            "pseudo_affinity": -gyration,
        }
        var_e = self.epistemic_coeff / (1.0 + m)
        return {name: PropertyEstimate(values[name], self.aleatoric_var[name], var_e)
                for name in self.property_names}


def _n_components(graph) -> int:
    n = graph.n_atoms
    adj = graph.adjacency()
    seen = [False] * n
    count = 0
    for start in range(n):
        if seen[start]:
            continue
        count += 1
        stack = [start]
        seen[start] = True
        while stack:
            node = stack.pop()
            for nbr, _ in adj[node]:
                if not seen[nbr]:
                    seen[nbr] = True
                    stack.append(nbr)
    return count


def synthetic_oracles(vocab: AtomVocabulary, aleatoric_var=None,
                      epistemic_coeff=0.1) -> SyntheticOracle:
    return SyntheticOracle(vocab, aleatoric_var, epistemic_coeff)


class ExternalTableOracle:
    """Estimates read from a CSV keyed by canonical graph hash (hex).

    Columns: ``molecule_hash`` then ``<prop>_mean, <prop>_var_aleatoric,
    <prop>_var_epistemic`` per property. Serves externally predicted values
    for known molecule sets; unknown molecules raise ConfigError.
    """

    def __init__(self, path, property_names, vocab: AtomVocabulary, directions=None):
        self.vocab = vocab
        self.property_names = tuple(property_names)
        self.directions = directions or {}
        self.rows = {}
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                estimates = {}
                for name in self.property_names:
                    estimates[name] = PropertyEstimate(
                        float(row[f"{name}_mean"]),
                        float(row[f"{name}_var_aleatoric"]),
                        float(row[f"{name}_var_epistemic"]))
                self.rows[row["molecule_hash"]] = estimates

    def predict(self, config: MolecularConfig) -> dict:
        key = format(canonical_hash(infer_bonds(config, self.vocab)), "x")
        if key not in self.rows:
            raise ConfigError(f"molecule hash {key} not present in the external table")
        return self.rows[key]


# ---------------------------------------------------------------------------
# Regression and calibration metrics
# ---------------------------------------------------------------------------

def r_squared(truth, pred) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.size < 2:
        raise ConfigError("r_squared needs two equal-length vectors of size >= 2")
    ss_tot = float(((truth - truth.mean())**2).sum())
    if ss_tot <= 0.0:
        raise DegenerateDataError("truth is constant; r_squared undefined")
    ss_res = float(((truth - pred)**2).sum())
    return 1.0 - ss_res / ss_tot


def calibration_curve(truth, means, sigmas, levels: int = 100):
    """Empirical coverage of central Gaussian intervals on a uniform level grid.

    A point is covered at level c iff |y - mu| <= z_{(1+c)/2} sigma, which is
    equivalent to 2 Phi(|y - mu| / sigma) - 1 <= c.
    """
    truth = np.asarray(truth, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if not (truth.shape == means.shape == sigmas.shape):
        raise ConfigError("truth, means and sigmas must have equal shapes")
    if levels < 2:
        raise ConfigError(f"need at least 2 confidence levels, got {levels}")
    if np.any(sigmas <= 0):
        raise ConfigError("sigmas must be positive")
    z = np.abs(truth - means) / sigmas
    min_level = 2.0 * (0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))) - 1.0
    grid = np.linspace(0.0, 1.0, levels)
    coverage = [(float(c), float(np.mean(min_level <= c))) for c in grid]
    return coverage


def auce(truth, means, sigmas, levels: int = 100) -> float:
    """Trapezoidal integral of |empirical coverage - level| over [0, 1]."""
    curve = calibration_curve(truth, means, sigmas, levels)
    grid = np.array([c for c, _ in curve])
    gap = np.array([abs(p - c) for c, p in curve])
    return float(np.trapz(gap, grid))


def pearson_matrix(table) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 2:
        raise ConfigError("pearson_matrix needs an n x k table with n >= 2")
    stds = table.std(axis=0)
    if np.any(stds <= 0):
        bad = int(np.argmin(stds))
        raise DegenerateDataError(f"column {bad} is constant; correlation undefined")
    return np.corrcoef(table, rowvar=False)
