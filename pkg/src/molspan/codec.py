"""Spanning-tree tokenization of molecular graphs and its exact inverse.

Encoding walks a depth-first tree of each component. Tree bonds become
``bond atom`` pairs, the non-last children of a node are wrapped in
branches, and each non-tree (ring) bond becomes a ``[bor]`` anchor at its
earlier-visited endpoint plus ``bond [eor-i]`` at the later one, where ``i``
indexes the currently-open anchors oldest-first. At every node the emission
order is: ring closures, then anchors, then branches, then the main-path
continuation, which keeps the number of simultaneously open anchors small.

Decoding replays the mask engine (budget checks off), so any sequence it
accepts is structurally and valency-wise sound; the molecule is then read
off the final decoder state.
"""

from __future__ import annotations

import numpy as np

from . import vocab as V
from .graph import Atom, MolGraph
from .masking import MaskViolation, replay
from .vocab import Vocab


class EncodeError(ValueError):
    pass


class DecodeError(ValueError):
    def __init__(self, position: int, message: str):
        self.position = position
        super().__init__(f"position {position}: {message}")


def encode(g: MolGraph, vocab: Vocab, rng: np.random.Generator | None = None) -> list[int]:
    """Token ids (BOS ... EOS) for the graph.

    With ``rng`` the traversal is randomized (component order, roots and
    neighbor order); without it the canonical order is used: components in
    first-atom order, root = lowest atom index, neighbors index-sorted.
    """
    adj = g.adjacency()
    n = len(g.atoms)

    atom_ids = []
    for atom in g.atoms:
        try:
            atom_ids.append(vocab.atom_id(*atom.signature))
        except KeyError as exc:
            raise EncodeError(str(exc)) from exc

    visited = [False] * n
    components: list[int] = []
    for start in range(n):
        if not visited[start]:
            components.append(start)
            stack = [start]
            visited[start] = True
            while stack:
                u = stack.pop()
                for v in adj[u]:
                    if not visited[v]:
                        visited[v] = True
                        stack.append(v)
    if rng is not None:
        rng.shuffle(components)

    ids = [V.BOS]
    open_anchors: list[tuple[int, int]] = []  # (atom, ring-edge partner)
    for k, comp_seed in enumerate(components):
        if k > 0:
            ids.append(V.DOT_ID)
        _encode_component(g, adj, atom_ids, comp_seed, vocab, rng, ids, open_anchors)
    ids.append(V.EOS)
    return ids


def _component_atoms(adj, seed) -> list[int]:
    members, stack, seen = [], [seed], {seed}
    while stack:
        u = stack.pop()
        members.append(u)
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return members


def _encode_component(g, adj, atom_ids, comp_seed, vocab, rng, ids, open_anchors):
    members = sorted(_component_atoms(adj, comp_seed))
    if rng is None:
        root = members[0]
    else:
        root = members[int(rng.integers(len(members)))]

    # Fix the DFS tree first so ring edges are known before emission. The
    # proper depth-first order matters: it makes every non-tree edge a back
    # edge, so a [bor] opener always has a tree child below it and anchors
    # never sit on branch leaves.
    parent: dict[int, int] = {root: -1}
    children: dict[int, list[int]] = {u: [] for u in members}
    pos_of: dict[int, int] = {}

    def dfs(u: int):
        pos_of[u] = len(pos_of)
        nbrs = sorted(adj[u])
        if rng is not None:
            rng.shuffle(nbrs)
        for v in nbrs:
            if v not in parent:
                parent[v] = u
                children[u].append(v)
                dfs(v)

    dfs(root)

    ring_open_at: dict[int, list[int]] = {u: [] for u in members}
    ring_close_at: dict[int, list[int]] = {u: [] for u in members}
    for u in members:
        for v in adj[u]:
            if parent.get(v) == u or parent.get(u) == v or pos_of[u] > pos_of[v]:
                continue
            ring_open_at[u].append(v)
            ring_close_at[v].append(u)

    def emit(u: int):
        ids.append(atom_ids[u])
        closes = ring_close_at[u]
        opens = ring_open_at[u]
        if rng is not None:
            rng.shuffle(closes)
            rng.shuffle(opens)
        for w in closes:
            idx = next(
                i for i, (a, b) in enumerate(open_anchors) if a == w and b == u
            )
            open_anchors.pop(idx)
            ids.append(vocab.bond_id(adj[u][w]))
            ids.append(vocab.eor_id(idx + 1))
        for w in opens:
            if len(open_anchors) >= vocab.r_max:
                raise EncodeError(
                    f"ring capacity exceeded: more than {vocab.r_max} "
                    "simultaneously open ring bonds"
                )
            open_anchors.append((u, w))
            ids.append(V.BOR_ID)
        kids = children[u]
        for v in kids[:-1]:
            ids.append(V.OPEN_ID)
            ids.append(vocab.bond_id(adj[u][v]))
            emit(v)
            ids.append(V.CLOSE_ID)
        if kids:
            v = kids[-1]
            ids.append(vocab.bond_id(adj[u][v]))
            emit(v)

    emit(root)


def decode(ids: list[int], vocab: Vocab) -> MolGraph:
    """Inverse of :func:`encode`; raises DecodeError with the bad position."""
    if not ids:
        raise DecodeError(0, "empty sequence")
    ids = [int(t) for t in ids]
    if ids[0] != V.BOS:
        raise DecodeError(0, "sequence must start with BOS")
    if ids[-1] != V.EOS:
        raise DecodeError(len(ids) - 1, "sequence must end with EOS")
    for pos, tid in enumerate(ids):
        if not 0 <= tid < len(vocab):
            raise DecodeError(pos, f"token id {tid} outside the vocabulary")
    try:
        state = replay(vocab, ids, enforce_budget=False)
    except MaskViolation as exc:
        raise DecodeError(exc.position, str(exc)) from exc
    atoms = []
    for tid in state.atoms:
        t = vocab.atom_token_of(tid)
        atoms.append(Atom(t.element, t.charge, t.h_count))
    return MolGraph(atoms, list(state.bonds))


def tokens_to_text(ids: list[int], vocab: Vocab) -> str:
    return " ".join(vocab.tokens[t] for t in ids)


def text_to_tokens(text: str, vocab: Vocab) -> list[int]:
    ids = []
    for word in text.split():
        if word not in vocab.token_to_id:
            raise ValueError(f"unknown token {word!r}")
        ids.append(vocab.token_to_id[word])
    return ids
