"""Molecular graph data model and the graph utilities built on it.

A molecule is an undirected graph of atoms (element, formal charge, attached
hydrogens) joined by bonds of order 1..3. Multiple connected components are
allowed so that compounds such as ionic salts stay a single value.

Alongside the data model this module provides the surrogate properties used
for conditioning (molecular weight, cyclomatic ring count, heavy-atom count),
a budgeted VF2 isomorphism test, an order-independent canonical key based on
iterative neighborhood refinement, and circular fingerprints with Tanimoto
similarity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .periodic import ATOMIC_MASS, HYDROGEN_MASS, is_element


class IsomorphismUndecided(Exception):
    """Raised when the VF2 search exceeds its node budget."""


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    h_count: int = 0

    def __post_init__(self):
        # normalize numpy integers so hashing and reprs stay type-stable
        object.__setattr__(self, "charge", int(self.charge))
        object.__setattr__(self, "h_count", int(self.h_count))
        if not is_element(self.element):
            raise ValueError(f"unknown element symbol: {self.element!r}")
        if self.h_count < 0:
            raise ValueError("h_count must be non-negative")

    @property
    def signature(self) -> tuple[str, int, int]:
        return (self.element, self.charge, self.h_count)

    @property
    def token(self) -> str:
        """Compact text form, e.g. ``CH3``, ``NH2+``, ``O-``, ``Na+``."""
        s = self.element
        if self.h_count == 1:
            s += "H"
        elif self.h_count > 1:
            s += f"H{self.h_count}"
        if self.charge > 0:
            s += "+" if self.charge == 1 else f"+{self.charge}"
        elif self.charge < 0:
            s += "-" if self.charge == -1 else f"-{-self.charge}"
        return s


@dataclass
class MolGraph:
    atoms: list[Atom] = field(default_factory=list)
    bonds: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n = len(self.atoms)
        self.bonds = [(int(a), int(b), int(o)) for a, b, o in self.bonds]
        seen: set[tuple[int, int]] = set()
        for a, b, order in self.bonds:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"bond ({a},{b}) references a missing atom")
            if a == b:
                raise ValueError(f"self-bond on atom {a}")
            if order not in (1, 2, 3):
                raise ValueError(f"unsupported bond order {order}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ValueError(f"duplicate bond between atoms {key}")
            seen.add(key)

    def adjacency(self) -> list[dict[int, int]]:
        """Neighbor -> bond order maps, one per atom."""
        adj: list[dict[int, int]] = [{} for _ in self.atoms]
        for a, b, order in self.bonds:
            adj[a][b] = order
            adj[b][a] = order
        return adj

    def permuted(self, perm: list[int]) -> "MolGraph":
        """Relabel atoms so new index ``perm[i]`` holds old atom ``i``."""
        atoms = [self.atoms[0]] * len(self.atoms)
        for old, new in enumerate(perm):
            atoms[new] = self.atoms[old]
        bonds = [(perm[a], perm[b], o) for a, b, o in self.bonds]
        return MolGraph(atoms, bonds)


def weighted_degree(g: MolGraph, atom_index: int) -> int:
    """Sum of bond orders incident to the atom (its used valency)."""
    if not 0 <= atom_index < len(g.atoms):
        raise IndexError(f"atom index {atom_index} out of range")
    return sum(o for a, b, o in g.bonds if a == atom_index or b == atom_index)


def molecular_weight(g: MolGraph) -> float:
    """Total mass in Daltons, attached hydrogens included."""
    total = 0.0
    for atom in g.atoms:
        total += ATOMIC_MASS[atom.element] + atom.h_count * HYDROGEN_MASS
    return total


def connected_components(g: MolGraph) -> int:
    return len(component_members(g))


def component_members(g: MolGraph) -> list[list[int]]:
    """Atom indices of each connected component, in first-seen order."""
    n = len(g.atoms)
    adj = g.adjacency()
    seen = [False] * n
    comps: list[list[int]] = []
    for start in range(n):
        if seen[start]:
            continue
        stack, members = [start], []
        seen[start] = True
        while stack:
            u = stack.pop()
            members.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(members)
    return comps


def ring_count(g: MolGraph) -> int:
    """Cyclomatic number: |bonds| - |atoms| + #components."""
    return len(g.bonds) - len(g.atoms) + connected_components(g)


def heavy_atom_count(g: MolGraph) -> int:
    return len(g.atoms)


# ---------------------------------------------------------------------------
# Isomorphism (VF2-style backtracking)

def is_isomorphic(a: MolGraph, b: MolGraph, node_budget: int = 2_000_000) -> bool:
    """Label-preserving graph isomorphism test.

    Atoms match on (element, charge, h_count); bonds must agree in order.
    Backtracking search with degree/label pruning; raises
    :class:`IsomorphismUndecided` if the search tree exceeds ``node_budget``
    nodes, which callers treat as a failed comparison.
    """
    if len(a.atoms) != len(b.atoms) or len(a.bonds) != len(b.bonds):
        return False
    sig_a = sorted(at.signature for at in a.atoms)
    sig_b = sorted(at.signature for at in b.atoms)
    if sig_a != sig_b:
        return False
    if sorted(o for _, _, o in a.bonds) != sorted(o for _, _, o in b.bonds):
        return False

    adj_a, adj_b = a.adjacency(), b.adjacency()
    # Refined invariants double as cheap mismatch detection and pruning labels.
    lab_a = _refine_labels(a, adj_a)
    lab_b = _refine_labels(b, adj_b)
    if sorted(lab_a) != sorted(lab_b):
        return False

    n = len(a.atoms)
    by_label: dict[int, list[int]] = {}
    for j in range(n):
        by_label.setdefault(lab_b[j], []).append(j)

    # Match highest-degree/rarest-label atoms first.
    order = sorted(range(n), key=lambda i: (len(by_label[lab_a[i]]), -len(adj_a[i])))
    core_a = [-1] * n
    core_b = [-1] * n
    budget = [node_budget]

    def feasible(i: int, j: int) -> bool:
        if lab_a[i] != lab_b[j]:
            return False
        if len(adj_a[i]) != len(adj_b[j]):
            return False
        for u, o in adj_a[i].items():
            v = core_a[u]
            if v != -1:
                if adj_b[j].get(v) != o:
                    return False
        for v, o in adj_b[j].items():
            u = core_b[v]
            if u != -1:
                if adj_a[i].get(u) != o:
                    return False
        return True

    def search(depth: int) -> bool:
        if depth == n:
            return True
        budget[0] -= 1
        if budget[0] <= 0:
            raise IsomorphismUndecided(
                f"node budget exhausted comparing graphs of {n} atoms"
            )
        i = order[depth]
        for j in by_label[lab_a[i]]:
            if core_b[j] != -1:
                continue
            if feasible(i, j):
                core_a[i] = j
                core_b[j] = i
                if search(depth + 1):
                    return True
                core_a[i] = -1
                core_b[j] = -1
        return False

    return search(0)


def _refine_labels(g: MolGraph, adj: list[dict[int, int]], rounds: int | None = None) -> list[int]:
    """Weisfeiler-Lehman style label refinement; returns integer labels."""
    labels = [hash_label(repr(at.signature)) for at in g.atoms]
    if rounds is None:
        rounds = 2 * _max_component_diameter(g, adj)
    for _ in range(max(rounds, 1)):
        nxt = []
        for i in range(len(labels)):
            env = sorted((int(o), labels[j]) for j, o in adj[i].items())
            nxt.append(hash_label(f"{labels[i]}|{env}"))
        if nxt == labels:
            break
        labels = nxt
    return labels


def hash_label(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _max_component_diameter(g: MolGraph, adj: list[dict[int, int]]) -> int:
    best = 0
    for members in component_members(g):
        for src in members:
            dist = {src: 0}
            frontier = [src]
            while frontier:
                nxt = []
                for u in frontier:
                    for v in adj[u]:
                        if v not in dist:
                            dist[v] = dist[u] + 1
                            nxt.append(v)
                frontier = nxt
            best = max(best, max(dist.values(), default=0))
    return best


def canonical_key(g: MolGraph) -> str:
    """Deterministic, permutation-invariant key.

    Built from refined neighborhood labels digested per component and sorted.
    Equal graphs always map to equal keys; the (unlikely) collision of two
    non-isomorphic graphs is resolved by :func:`is_isomorphic` wherever
    uniqueness is decided.
    """
    adj = g.adjacency()
    labels = _refine_labels(g, adj)
    comp_digests = []
    for members in component_members(g):
        multiset = sorted(labels[i] for i in members)
        comp_digests.append(hashlib.sha256(repr(multiset).encode()).hexdigest()[:16])
    return ".".join(sorted(comp_digests))


# ---------------------------------------------------------------------------
# Circular fingerprints

@dataclass
class Fingerprint:
    """Fixed-length bitset packed into 64-bit words."""

    words: np.ndarray
    n_bits: int = 2048
    radius: int = 2

    def __post_init__(self):
        if self.n_bits <= 0 or self.n_bits & (self.n_bits - 1):
            raise ValueError("n_bits must be a positive power of two")

    def popcount(self) -> int:
        return int(np.bitwise_count(self.words).sum())


def circular_fingerprint(g: MolGraph, radius: int = 2, n_bits: int = 2048) -> Fingerprint:
    """Hash each atom's r-neighborhood digest (r = 0..radius) into one bit."""
    if n_bits <= 0 or n_bits & (n_bits - 1):
        raise ValueError("n_bits must be a positive power of two")
    adj = g.adjacency()
    labels = [hash_label(repr(at.signature)) for at in g.atoms]
    words = np.zeros(n_bits // 64, dtype=np.uint64)
    for _ in range(radius + 1):
        for lab in labels:
            bit = lab % n_bits
            words[bit // 64] |= np.uint64(1) << np.uint64(bit % 64)
        nxt = []
        for i in range(len(labels)):
            env = sorted((int(o), labels[j]) for j, o in adj[i].items())
            nxt.append(hash_label(f"{labels[i]}|{env}"))
        labels = nxt
    return Fingerprint(words, n_bits=n_bits, radius=radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|intersection| / |union| of set bits; 1.0 when both sets are empty."""
    if a.n_bits != b.n_bits:
        raise ValueError("fingerprint lengths differ")
    inter = int(np.bitwise_count(a.words & b.words).sum())
    union = int(np.bitwise_count(a.words | b.words).sum())
    if union == 0:
        return 1.0
    return inter / union
