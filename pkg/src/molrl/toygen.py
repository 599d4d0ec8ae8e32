"""Random valid-molecule generator for desk-scale experiments.

Grows random trees: each new atom bonds to an existing atom with spare
valence at a distance inside the single-bond window, rejecting placements
that would create extra bonds. The result is connected with all valences
satisfied, so every generated molecule passes the validity check.
"""

from __future__ import annotations

import os

import numpy as np

from .molgraph import (AtomVocabulary, MolecularConfig, is_valid, write_manifest,
                       write_xyz)

DEFAULT_SYMBOLS = ("C", "N", "O", "F")


def make_toy_molecule(rng, vocab: AtomVocabulary, min_atoms: int = 2,
                      max_atoms: int = 9) -> MolecularConfig:
    while True:
        m = int(rng.integers(min_atoms, max_atoms + 1))
        config = _grow(rng, vocab, m)
        if config is not None and is_valid(config, vocab):
            return config


def _grow(rng, vocab, m):
    symbols = [vocab.symbols[rng.integers(len(vocab))]]
    coords = [np.zeros(3)]
    degrees = [0]
    for _ in range(m - 1):
        symbol = vocab.symbols[rng.integers(len(vocab))]
        open_sites = [i for i in range(len(symbols))
                      if degrees[i] < vocab.max_valence[symbols[i]]]
        if not open_sites:
            return None
        parent = open_sites[rng.integers(len(open_sites))]
        r_new = vocab.covalent_radius[symbol]
        placed = None
        for _ in range(60):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            length = vocab.covalent_radius[symbols[parent]] + r_new + rng.uniform(0.05, 0.30)
            pos = coords[parent] + direction * length
            clash = False
            for q in range(len(symbols)):
                if q == parent:
                    continue
                # stay outside the bond window of every non-parent atom
                if np.linalg.norm(pos - coords[q]) <= vocab.covalent_radius[symbols[q]] + r_new + 0.45:
                    clash = True
                    break
            if not clash:
                placed = pos
                break
        if placed is None:
            return None
        symbols.append(symbol)
        coords.append(placed)
        degrees.append(1)
        degrees[parent] += 1
    return MolecularConfig.create(symbols, np.array(coords))


def write_toy_dataset(out_dir, n: int, seed: int, symbols=DEFAULT_SYMBOLS,
                      min_atoms: int = 2, max_atoms: int = 9,
                      property_names=("pseudo_qed", "pseudo_sas", "pseudo_affinity")):
    """Write n random valid molecules plus the dataset manifest."""
    os.makedirs(out_dir, exist_ok=True)
    vocab = AtomVocabulary(symbols)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x707]) ))
    write_manifest(out_dir, vocab, property_names)
    for i in range(n):
        config = make_toy_molecule(rng, vocab, min_atoms, max_atoms)
        write_xyz(os.path.join(out_dir, f"mol_{i:05d}.xyz"), config)
    return vocab


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(description="generate a toy XYZ dataset")
    parser.add_argument("out_dir")
    parser.add_argument("--n", type=int, default=500)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--max-atoms", type=int, default=9)
    args = parser.parse_args(argv)
    write_toy_dataset(args.out_dir, args.n, args.seed, max_atoms=args.max_atoms)


if __name__ == "__main__":
    main()
