"""Generation-quality metrics over a sampled set against a training reference.

validity    = |valid| / |generated|
uniqueness  = |deduplicated valid| / |valid|
novelty     = |unique valid not in train| / |unique valid|
VUN         = validity * uniqueness * novelty (percent algebra)
atom/molecular stability are counted over valid molecules; top molecules are
the novel ones whose oracle means clear every property cutoff, over the full
generated count. ``brute_force_report`` recomputes everything by explicit
pairwise isomorphism instead of hashing and must agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .molgraph import (AtomVocabulary, MolecularConfig, atom_valence_ok, canonical_hash,
                       graphs_isomorphic, infer_bonds, is_connected)
from .errors import ConfigError


@dataclass
class GenerationReport:
    n_generated: int
    validity: float
    uniqueness: float
    novelty: float
    vun: float
    atom_stability: float
    mol_stability: float
    top_molecules: float
    degenerate: bool = False
    per_atom_valence_fraction: float = 0.0  # non-headline, EDM-literature convention
    details: list = field(default_factory=list)

    def summary_dict(self) -> dict:
        return {
            "n_generated": self.n_generated,
            "validity": self.validity,
            "uniqueness": self.uniqueness,
            "novelty": self.novelty,
            "vun": self.vun,
            "atom_stability": self.atom_stability,
            "mol_stability": self.mol_stability,
            "top_molecules": self.top_molecules,
            "degenerate": self.degenerate,
            "per_atom_valence_fraction": self.per_atom_valence_fraction,
        }


def _classify(config: MolecularConfig, vocab: AtomVocabulary):
    graph = infer_bonds(config, vocab)
    valences_ok = [atom_valence_ok(graph, a, vocab) for a in range(graph.n_atoms)]
    connected = is_connected(graph)
    valid = connected and all(valences_ok)
    return graph, connected, valences_ok, valid


def _percent(count: int, denom: int) -> float:
    return 100.0 * count / denom if denom else 0.0


def _assemble(n_gen, rows, unique_flags, train_hashes, oracle, specs):
    valid_rows = [r for r in rows if r["valid"]]
    n_valid = len(valid_rows)
    unique_rows = [r for r, u in zip(rows, unique_flags) if r["valid"] and u]
    novel_rows = [r for r in unique_rows if r["hash"] not in train_hashes]
    for r, u in zip(rows, unique_flags):
        r["unique"] = bool(r["valid"] and u)
        r["novel"] = bool(r["unique"] and r["hash"] not in train_hashes)
    atoms_total = sum(r["n_atoms"] for r in rows)
    atoms_ok = sum(r["n_valence_ok"] for r in rows)
    stable_atom = sum(1 for r in valid_rows if r["n_valence_ok"] == r["n_atoms"])
    stable_mol = sum(1 for r in valid_rows
                     if r["connected"] and r["n_valence_ok"] == r["n_atoms"])
    top = 0
    for r in novel_rows:
        estimates = oracle.predict(r["config"])
        if all(spec.satisfied(estimates[spec.name].mean) for spec in specs):
            top += 1
    report = GenerationReport(
        n_generated=n_gen,
        validity=_percent(n_valid, n_gen),
        uniqueness=_percent(len(unique_rows), n_valid),
        novelty=_percent(len(novel_rows), len(unique_rows)),
        vun=_percent(len(novel_rows), n_gen),
        atom_stability=_percent(stable_atom, n_valid),
        mol_stability=_percent(stable_mol, n_valid),
        top_molecules=_percent(top, n_gen),
        degenerate=(n_valid == 0),
        per_atom_valence_fraction=(atoms_ok / atoms_total) if atoms_total else 0.0,
    )
    for r in rows:
        report.details.append({
            "index": r["index"],
            "n_atoms": r["n_atoms"],
            "valid": r["valid"],
            "unique": r["unique"],
            "novel": r["novel"],
            "connected": r["connected"],
            "n_valence_ok": r["n_valence_ok"],
            "hash": format(r["hash"], "x"),
        })
    return report


def _base_rows(generated, vocab):
    rows = []
    for index, config in enumerate(generated):
        graph, connected, valences_ok, valid = _classify(config, vocab)
        rows.append({
            "index": index,
            "config": config,
            "graph": graph,
            "n_atoms": config.n_atoms,
            "connected": connected,
            "n_valence_ok": sum(valences_ok),
            "valid": valid,
            "hash": canonical_hash(graph),
        })
    return rows


def evaluate(generated, train_hashes, oracle, specs, vocab: AtomVocabulary) -> GenerationReport:
    """Hash-based metric computation."""
    if not generated:
        raise ConfigError("evaluate needs a nonempty generated set")
    rows = _base_rows(generated, vocab)
    seen = set()
    unique_flags = []
    for r in rows:
        if not r["valid"]:
            unique_flags.append(False)
            continue
        fresh = r["hash"] not in seen
        seen.add(r["hash"])
        unique_flags.append(fresh)
    return _assemble(len(generated), rows, unique_flags, train_hashes, oracle, specs)


def brute_force_report(generated, train_hashes, oracle, specs,
                       vocab: AtomVocabulary) -> GenerationReport:
    """Independent oracle: duplicates found by pairwise isomorphism, small sets only."""
    if not generated:
        raise ConfigError("brute_force_report needs a nonempty generated set")
    if len(generated) > 20:
        raise ConfigError("brute_force_report is restricted to sets of <= 20 molecules")
    rows = _base_rows(generated, vocab)
    unique_flags = []
    for i, r in enumerate(rows):
        if not r["valid"]:
            unique_flags.append(False)
            continue
        duplicate = any(rows[j]["valid"] and graphs_isomorphic(rows[j]["graph"], r["graph"])
                        for j in range(i))
        unique_flags.append(not duplicate)
    return _assemble(len(generated), rows, unique_flags, train_hashes, oracle, specs)
