"""Geometry and chemistry core.

Molecular configurations (atom types + 3D coordinates + condition vector),
zero-center-of-gravity algebra, distance-based bond inference, valence
checks, a permutation-invariant canonical graph hash, circular fingerprints
with Tanimoto similarity, and XYZ dataset ingestion with species-based
splitting.

All heavy atoms only; hydrogens are implicit, so the valence check is
"sum of bond orders <= max valence".
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError, VocabError, XyzParseError

# Standard single-bond covalent radii (Angstrom) and maximum valences for
# the heavy elements of the supported datasets.
COVALENT_RADIUS = {
    "C": 0.76, "N": 0.71, "O": 0.66, "F": 0.57,
    "P": 1.07, "S": 1.05, "Cl": 1.02, "Br": 1.20, "I": 1.39,
}
MAX_VALENCE = {
    "C": 4, "N": 3, "O": 2, "F": 1,
    "P": 5, "S": 6, "Cl": 1, "Br": 1, "I": 1,
}

BOND_MARGIN = 0.40        # single bond: d <= r_i + r_j + margin
DOUBLE_BOND_DELTA = 0.15  # order 2:     d <= r_i + r_j - delta
TRIPLE_BOND_DELTA = 0.30  # order 3:     d <= r_i + r_j - delta

FINGERPRINT_WIDTH = 2048
WL_ITERATIONS = 4


class AtomVocabulary:
    """Ordered element list with encoder, valence and radius tables."""

    def __init__(self, symbols, max_valence=None, covalent_radius=None):
        self.symbols = list(symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise ConfigError(f"duplicate symbols in vocabulary: {self.symbols}")
        self.encoder = {s: i for i, s in enumerate(self.symbols)}
        self.max_valence = dict(max_valence) if max_valence else {
            s: MAX_VALENCE[s] for s in self.symbols}
        self.covalent_radius = dict(covalent_radius) if covalent_radius else {
            s: COVALENT_RADIUS[s] for s in self.symbols}
        for s in self.symbols:
            if self.covalent_radius[s] <= 0:
                raise ConfigError(f"covalent radius for {s} must be > 0")
            if self.max_valence[s] < 1:
                raise ConfigError(f"max valence for {s} must be >= 1")

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self.encoder

    def index(self, symbol: str) -> int:
        try:
            return self.encoder[symbol]
        except KeyError:
            raise VocabError(f"unknown element {symbol!r}; vocabulary is {self.symbols}") from None

    def to_dict(self):
        return {
            "symbols": self.symbols,
            "max_valence": {s: self.max_valence[s] for s in self.symbols},
            "covalent_radius": {s: self.covalent_radius[s] for s in self.symbols},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["symbols"], d.get("max_valence"), d.get("covalent_radius"))


def project_to_zero_cog(coords: np.ndarray) -> np.ndarray:
    """Subtract the centroid so coordinate columns sum to zero.

    Pairwise distances are unchanged; the operation is idempotent.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
        raise GeometryError(f"expected an Mx3 coordinate matrix, got shape {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise GeometryError("coordinates contain non-finite values")
    return coords - coords.mean(axis=0, keepdims=True)


@dataclass(frozen=True)
class MolecularConfig:
    """A molecule as generated and scored: symbols, zero-CoG coordinates, condition."""

    atom_types: tuple
    coords: np.ndarray
    condition: np.ndarray

    @classmethod
    def create(cls, atom_types, coords, condition=(), vocab: AtomVocabulary | None = None):
        atom_types = tuple(atom_types)
        if len(atom_types) < 1:
            raise GeometryError("a molecule needs at least one atom")
        if vocab is not None:
            for s in atom_types:
                vocab.index(s)
        coords = project_to_zero_cog(coords)
        if coords.shape[0] != len(atom_types):
            raise GeometryError(
                f"{len(atom_types)} atom types but {coords.shape[0]} coordinate rows")
        coords.setflags(write=False)
        condition = np.array(condition, dtype=np.float64).reshape(-1)
        condition.setflags(write=False)
        return cls(atom_types, coords, condition)

    @property
    def n_atoms(self) -> int:
        return len(self.atom_types)


@dataclass(frozen=True)
class MolecularGraph:
    """Bonded graph derived from a configuration: elements + (i, j, order) edges."""

    elements: tuple
    edges: tuple  # ((i, j, order), ...) with i < j, unique

    @property
    def n_atoms(self) -> int:
        return len(self.elements)

    def adjacency(self):
        adj = [[] for _ in self.elements]
        for i, j, order in self.edges:
            adj[i].append((j, order))
            adj[j].append((i, order))
        return adj

    def degree(self, atom: int) -> int:
        return sum(1 for i, j, _ in self.edges if atom in (i, j))


def infer_bonds(config: MolecularConfig, vocab: AtomVocabulary) -> MolecularGraph:
    """Distance-bin bond perception.

    Bonded iff d <= r_i + r_j + 0.40 A; order 2 below r_i + r_j - 0.15 A and
    order 3 below r_i + r_j - 0.30 A, capped by the smaller max valence of the
    pair so monovalent elements only form single bonds.
    """
    coords = config.coords
    radii = []
    for s in config.atom_types:
        if s not in vocab.covalent_radius:
            raise VocabError(f"no covalent radius for element {s!r}")
        radii.append(vocab.covalent_radius[s])
    m = config.n_atoms
    edges = []
    for i in range(m):
        for j in range(i + 1, m):
            d = float(np.linalg.norm(coords[i] - coords[j]))
            rsum = radii[i] + radii[j]
            if d > rsum + BOND_MARGIN:
                continue
            if d <= rsum - TRIPLE_BOND_DELTA:
                order = 3
            elif d <= rsum - DOUBLE_BOND_DELTA:
                order = 2
            else:
                order = 1
            cap = min(vocab.max_valence[config.atom_types[i]],
                      vocab.max_valence[config.atom_types[j]])
            edges.append((i, j, min(order, max(1, cap))))
    return MolecularGraph(tuple(config.atom_types), tuple(edges))


def atom_valence_ok(graph: MolecularGraph, atom: int, vocab: AtomVocabulary) -> bool:
    """True iff the sum of incident bond orders fits under the element's max valence."""
    element = graph.elements[atom]
    if element not in vocab.max_valence:
        raise VocabError(f"unknown element {element!r}")
    total = sum(order for i, j, order in graph.edges if atom in (i, j))
    return total <= vocab.max_valence[element]


def is_connected(graph: MolecularGraph) -> bool:
    if graph.n_atoms <= 1:
        return True
    adj = graph.adjacency()
    seen = {0}
    stack = [0]
    while stack:
        node = stack.pop()
        for nbr, _ in adj[node]:
            if nbr not in seen:
                seen.add(nbr)
                stack.append(nbr)
    return len(seen) == graph.n_atoms


def is_valid(config: MolecularConfig, vocab: AtomVocabulary) -> bool:
    """Operational validity: bonds inferred, graph connected, every valence ok."""
    try:
        graph = infer_bonds(config, vocab)
    except (VocabError, GeometryError):
        return False
    if not is_connected(graph):
        return False
    return all(atom_valence_ok(graph, a, vocab) for a in range(graph.n_atoms))


# ---------------------------------------------------------------------------
# Canonical hashing and fingerprints
# ---------------------------------------------------------------------------

def _stable_hash(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def _wl_colors(graph: MolecularGraph, iterations: int = WL_ITERATIONS):
    """Weisfeiler-Lehman colors seeded by (element, degree), edges labeled by order."""
    adj = graph.adjacency()
    colors = [_stable_hash("seed", graph.elements[i], len(adj[i]))
              for i in range(graph.n_atoms)]
    for _ in range(iterations):
        colors = [
            _stable_hash("wl", colors[i],
                         tuple(sorted((order, colors[j]) for j, order in adj[i])))
            for i in range(graph.n_atoms)
        ]
    return colors


def canonical_hash(graph: MolecularGraph) -> int:
    """128-bit digest, equal for isomorphic graphs and permutation invariant."""
    colors = _wl_colors(graph)
    h = hashlib.blake2b(digest_size=16)
    for c in sorted(colors):
        h.update(c.to_bytes(8, "little"))
    for sig in sorted(_stable_hash("edge", order, *sorted((colors[i], colors[j])))
                      for i, j, order in graph.edges):
        h.update(sig.to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class Fingerprint:
    """Fixed-width folded bit vector of circular neighborhood hashes."""

    bits: frozenset
    width: int = FINGERPRINT_WIDTH

    def count(self) -> int:
        return len(self.bits)


def fingerprint(graph: MolecularGraph, width: int = FINGERPRINT_WIDTH) -> Fingerprint:
    """ECFP-like circular fingerprint: per-atom neighborhood hashes of radius <= 2."""
    adj = graph.adjacency()
    layer = [_stable_hash("fp0", graph.elements[i], len(adj[i]))
             for i in range(graph.n_atoms)]
    bits = {h % width for h in layer}
    for radius in (1, 2):
        layer = [
            _stable_hash("fp", radius, layer[i],
                         tuple(sorted((order, layer[j]) for j, order in adj[i])))
            for i in range(graph.n_atoms)
        ]
        bits.update(h % width for h in layer)
    return Fingerprint(frozenset(bits), width)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|a & b| / |a | b|; defined as 1 when both fingerprints are empty."""
    if a.width != b.width:
        raise ConfigError(f"fingerprint width mismatch: {a.width} vs {b.width}")
    union = len(a.bits | b.bits)
    if union == 0:
        return 1.0
    return len(a.bits & b.bits) / union


# ---------------------------------------------------------------------------
# Graph isomorphism (brute-force oracle support)
# ---------------------------------------------------------------------------

def graphs_isomorphic(a: MolecularGraph, b: MolecularGraph) -> bool:
    """Exact isomorphism by backtracking; intended for small (<= ~20 atom) graphs."""
    if a.n_atoms != b.n_atoms or len(a.edges) != len(b.edges):
        return False
    if sorted(a.elements) != sorted(b.elements):
        return False
    ca, cb = _wl_colors(a), _wl_colors(b)
    if sorted(ca) != sorted(cb):
        return False
    adj_a = {(i, j): o for i, j, o in a.edges} | {(j, i): o for i, j, o in a.edges}
    adj_b = {(i, j): o for i, j, o in b.edges} | {(j, i): o for i, j, o in b.edges}
    n = a.n_atoms
    # Most-constrained-first: rarest WL color classes early.
    order = sorted(range(n), key=lambda i: (sum(1 for c in ca if c == ca[i]), i))
    mapping = [-1] * n
    used = [False] * n

    def extend(k):
        if k == n:
            return True
        i = order[k]
        for j in range(n):
            if used[j] or cb[j] != ca[i]:
                continue
            ok = True
            for prev in order[:k]:
                if adj_a.get((i, prev)) != adj_b.get((j, mapping[prev])):
                    ok = False
                    break
            if ok:
                mapping[i] = j
                used[j] = True
                if extend(k + 1):
                    return True
                used[j] = False
                mapping[i] = -1
        return False

    return extend(0)


# ---------------------------------------------------------------------------
# XYZ ingestion and species-based splitting
# ---------------------------------------------------------------------------

_PROPS_RE = re.compile(r"props:\s*(.*)$")


def parse_xyz(path, vocab: AtomVocabulary, property_names=()):
    """Parse one XYZ file: count, comment (optional ``props: k=v;...``), atom lines."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise XyzParseError(path, 1, "empty file")
    try:
        m = int(lines[0].strip())
    except ValueError:
        raise XyzParseError(path, 1, f"expected atom count, got {lines[0]!r}") from None
    if m < 1:
        raise XyzParseError(path, 1, f"atom count must be >= 1, got {m}")
    if len(lines) < 2 + m:
        raise XyzParseError(path, len(lines), f"expected {m} atom lines, file truncated")
    props = {}
    match = _PROPS_RE.search(lines[1])
    if match:
        for item in match.group(1).split(";"):
            item = item.strip()
            if not item:
                continue
            if "=" not in item:
                raise XyzParseError(path, 2, f"malformed property {item!r}")
            key, value = item.split("=", 1)
            try:
                props[key.strip()] = float(value)
            except ValueError:
                raise XyzParseError(path, 2, f"non-numeric property value {item!r}") from None
    symbols = []
    coords = []
    for k in range(m):
        line_no = 3 + k
        parts = lines[2 + k].split()
        if len(parts) != 4:
            raise XyzParseError(path, line_no, f"expected 'SYMBOL x y z', got {lines[2 + k]!r}")
        symbol = parts[0]
        if symbol not in vocab:
            raise VocabError(f"{path}:{line_no}: unknown element {symbol!r}")
        try:
            xyz = [float(v) for v in parts[1:]]
        except ValueError:
            raise XyzParseError(path, line_no, f"non-numeric coordinate in {lines[2 + k]!r}") from None
        symbols.append(symbol)
        coords.append(xyz)
    condition = [props.get(name, math.nan) for name in property_names]
    return MolecularConfig.create(symbols, np.array(coords), condition, vocab)


def write_xyz(path, config: MolecularConfig, property_names=()):
    lines = [str(config.n_atoms)]
    if property_names:
        pairs = ";".join(f"{n}={config.condition[i]!r}"
                         for i, n in enumerate(property_names))
        lines.append(f"props: {pairs}")
    else:
        lines.append("")
    for s, row in zip(config.atom_types, config.coords):
        lines.append(f"{s} {row[0]!r} {row[1]!r} {row[2]!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_xyz_dataset(path, vocab: AtomVocabulary, property_names=()):
    """Load every ``*.xyz`` under a dataset directory, sorted by filename."""
    names = sorted(n for n in os.listdir(path) if n.endswith(".xyz"))
    return [parse_xyz(os.path.join(path, n), vocab, property_names) for n in names]


def read_manifest(path):
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    return AtomVocabulary.from_dict(manifest["vocabulary"]), manifest["property_names"]


def write_manifest(path, vocab: AtomVocabulary, property_names):
    manifest = {"vocabulary": vocab.to_dict(), "property_names": list(property_names)}
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def species_key(config: MolecularConfig):
    return tuple(sorted(set(config.atom_types)))


def species_split_indices(keys, ratios, seed):
    """Partition index lists by species key, groups kept whole.

    Groups are shuffled deterministically by seed, then assigned greedily to
    the split with the largest remaining deficit against its target size.
    """
    if not keys:
        raise ConfigError("cannot split an empty dataset")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    groups = {}
    for idx, key in enumerate(keys):
        groups.setdefault(key, []).append(idx)
    group_keys = sorted(groups)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x5714])))
    rng.shuffle(group_keys)
    n = len(keys)
    targets = [r * n for r in ratios]
    counts = [0, 0, 0]
    assigned = [[], [], []]
    for key in group_keys:
        deficits = [targets[i] - counts[i] for i in range(3)]
        best = max(range(3), key=lambda i: (deficits[i], -i))
        assigned[best].extend(groups[key])
        counts[best] += len(groups[key])
    return tuple(sorted(part) for part in assigned)


def species_split(dataset, ratios, seed):
    """Split molecules into (train, valid, test) keeping each element-set group whole."""
    parts = species_split_indices([species_key(c) for c in dataset], ratios, seed)
    return tuple([dataset[i] for i in part] for part in parts)
