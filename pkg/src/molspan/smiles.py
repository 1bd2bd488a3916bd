"""Kekulized-subset SMILES reader and writer.

Supported input: organic-subset atoms (B, C, N, O, P, S, F, Cl, Br, I),
bracket atoms with explicit H count and charge, bonds ``- = #``, branches,
ring-bond digits (including ``%nn``), and dot-separated components. Aromatic
lowercase atoms, stereo marks, isotopes and wildcards are rejected with a
structured error; datasets containing them must be kekulized upstream.

The writer always emits bracket atoms with explicit hydrogen counts, so a
written string never depends on implicit-valence rules.
"""

from __future__ import annotations

from .graph import Atom, MolGraph
from .periodic import is_element

# Fixed implicit-hydrogen valences for the organic subset.
ORGANIC_VALENCE = {
    "B": 3, "C": 4, "N": 3, "O": 2, "P": 3, "S": 2,
    "F": 1, "Cl": 1, "Br": 1, "I": 1,
}

_BOND_ORDER = {"-": 1, "=": 2, "#": 3}
_ORDER_BOND = {1: "-", 2: "=", 3: "#"}


class SmilesError(ValueError):
    """Parse failure with character offset and a coarse failure kind."""

    KINDS = ("unsupported-feature", "syntax", "ring-mismatch", "valence-overflow")

    def __init__(self, position: int, kind: str, message: str):
        assert kind in self.KINDS
        self.position = position
        self.kind = kind
        super().__init__(f"{kind} at position {position}: {message}")


def parse_smiles(text: str) -> MolGraph:
    if not text:
        raise SmilesError(0, "syntax", "empty input")
    return _Parser(text).parse()


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.atoms: list[Atom] = []
        self.organic: list[bool] = []
        self.bonds: list[tuple[int, int, int]] = []
        self.bond_keys: set[tuple[int, int]] = set()

    def error(self, kind: str, message: str, pos: int | None = None):
        raise SmilesError(self.pos if pos is None else pos, kind, message)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> MolGraph:
        prev: int | None = None  # atom awaiting the next attachment
        pending_bond: int | None = None
        stack: list[int] = []
        # ring number -> (atom index, bond order or None, text position)
        open_rings: dict[int, tuple[int, int | None, int]] = {}

        while self.pos < len(self.text):
            ch = self.peek()
            if ch in _BOND_ORDER:
                if pending_bond is not None:
                    self.error("syntax", "two bond symbols in a row")
                pending_bond = _BOND_ORDER[ch]
                self.pos += 1
            elif ch == "(":
                if prev is None:
                    self.error("syntax", "branch before any atom")
                if pending_bond is not None:
                    self.error("syntax", "bond before '('")
                stack.append(prev)
                self.pos += 1
            elif ch == ")":
                if not stack:
                    self.error("syntax", "unmatched ')'")
                if pending_bond is not None:
                    self.error("syntax", "dangling bond before ')'")
                prev = stack.pop()
                self.pos += 1
            elif ch == ".":
                if stack:
                    self.error("syntax", "'.' inside a branch")
                if pending_bond is not None:
                    self.error("syntax", "bond before '.'")
                if prev is None:
                    self.error("syntax", "'.' before any atom")
                prev = None
                self.pos += 1
            elif ch.isdigit() or ch == "%":
                if prev is None:
                    self.error("syntax", "ring digit before any atom")
                num_pos = self.pos
                num = self._read_ring_number()
                self._ring_bond(num, prev, pending_bond, num_pos, open_rings)
                pending_bond = None
            elif ch in "/\\@":
                self.error("unsupported-feature", f"stereo mark {ch!r}")
            elif ch == "*":
                self.error("unsupported-feature", "wildcard atom")
            else:
                idx = self._read_atom()
                if prev is not None:
                    self._add_bond(prev, idx, pending_bond or 1)
                elif pending_bond is not None:
                    self.error("syntax", "bond with no preceding atom")
                pending_bond = None
                prev = idx

        if pending_bond is not None:
            self.error("syntax", "input ends with a dangling bond", len(self.text) - 1)
        if stack:
            self.error("syntax", "unclosed '('", len(self.text) - 1)
        if open_rings:
            num, (_, _, where) = next(iter(open_rings.items()))
            self.error("ring-mismatch", f"ring bond {num} never closed", where)

        self._fill_implicit_h()
        return MolGraph(self.atoms, self.bonds)

    def _read_ring_number(self) -> int:
        if self.peek() == "%":
            start = self.pos
            self.pos += 1
            digits = self.text[self.pos:self.pos + 2]
            if len(digits) != 2 or not digits.isdigit():
                self.error("syntax", "'%' must be followed by two digits", start)
            self.pos += 2
            return int(digits)
        num = int(self.peek())
        self.pos += 1
        return num

    def _ring_bond(self, num, atom, bond, where, open_rings):
        if num in open_rings:
            other, other_bond, _ = open_rings.pop(num)
            if other == atom:
                self.error("ring-mismatch", f"ring bond {num} closes on its own atom", where)
            if bond is not None and other_bond is not None and bond != other_bond:
                self.error("syntax", f"ring bond {num} orders disagree", where)
            self._add_bond(other, atom, bond or other_bond or 1, where)
        else:
            open_rings[num] = (atom, bond, where)

    def _add_bond(self, a: int, b: int, order: int, where: int | None = None):
        key = (min(a, b), max(a, b))
        if key in self.bond_keys:
            self.error("syntax", "duplicate bond between the same atoms", where)
        self.bond_keys.add(key)
        self.bonds.append((a, b, order))

    def _read_atom(self) -> int:
        ch = self.peek()
        if ch == "[":
            return self._read_bracket_atom()
        if ch.islower():
            self.error("unsupported-feature", f"aromatic atom {ch!r} (input must be kekulized)")
        two = self.text[self.pos:self.pos + 2]
        if two in ("Cl", "Br"):
            self.pos += 2
            return self._push_atom(Atom(two), organic=True)
        if ch in ORGANIC_VALENCE:
            self.pos += 1
            return self._push_atom(Atom(ch), organic=True)
        self.error("syntax", f"unexpected character {ch!r}")

    def _read_bracket_atom(self) -> int:
        start = self.pos
        self.pos += 1  # consume '['
        ch = self.peek()
        if ch.isdigit():
            self.error("unsupported-feature", "isotope specification")
        if ch == "*":
            self.error("unsupported-feature", "wildcard atom")
        if not ch.isalpha():
            self.error("syntax", "expected element symbol after '['")
        if ch.islower():
            self.error("unsupported-feature", f"aromatic atom {ch!r} (input must be kekulized)")
        symbol = ch
        self.pos += 1
        nxt = self.peek()
        # A lowercase continuation belongs to the symbol except for the H-count
        # marker; two-letter symbols like Na, Cl, Se are all <upper><lower>.
        if nxt.islower() and is_element(symbol + nxt):
            symbol += nxt
            self.pos += 1
        if not is_element(symbol):
            self.error("syntax", f"unknown element {symbol!r}", start + 1)

        h_count = 0
        if self.peek() == "H":
            self.pos += 1
            h_count = self._read_int(default=1)

        charge = 0
        ch = self.peek()
        if ch == "+" or ch == "-":
            sign = 1 if ch == "+" else -1
            self.pos += 1
            if self.peek() == ch:  # ++ / -- style
                n = 1
                while self.peek() == ch:
                    n += 1
                    self.pos += 1
                charge = sign * n
            else:
                charge = sign * self._read_int(default=1)
        if self.peek() in ("@", "/", "\\"):
            self.error("unsupported-feature", "stereo mark inside brackets")
        if self.peek() == ":":
            self.error("unsupported-feature", "atom-class label")
        if self.peek() != "]":
            self.error("syntax", "expected ']'")
        self.pos += 1
        return self._push_atom(Atom(symbol, charge, h_count), organic=False)

    def _read_int(self, default: int) -> int:
        digits = ""
        while self.peek().isdigit():
            digits += self.peek()
            self.pos += 1
        return int(digits) if digits else default

    def _push_atom(self, atom: Atom, organic: bool) -> int:
        self.atoms.append(atom)
        self.organic.append(organic)
        return len(self.atoms) - 1

    def _fill_implicit_h(self):
        used = [0] * len(self.atoms)
        for a, b, order in self.bonds:
            used[a] += order
            used[b] += order
        for i, atom in enumerate(self.atoms):
            if not self.organic[i]:
                continue
            valence = ORGANIC_VALENCE[atom.element]
            if used[i] > valence:
                raise SmilesError(
                    0, "valence-overflow",
                    f"atom {i} ({atom.element}) uses {used[i]} bonds, over its "
                    f"fixed valence {valence}",
                )
            self.atoms[i] = Atom(atom.element, 0, valence - used[i])


# ---------------------------------------------------------------------------
# Writer

def write_smiles(g: MolGraph) -> str:
    """Deterministic bracket-atom serialization; components joined by '.'."""
    adj = g.adjacency()
    n = len(g.atoms)
    visited = [False] * n
    parts = []
    for root in range(n):
        if not visited[root]:
            parts.append(_write_component(g, adj, root, visited))
    return ".".join(parts)


def _write_component(g, adj, root, visited) -> str:
    # First pass: depth-first tree with index-sorted neighbors.
    parent: dict[int, int] = {root: -1}
    order: list[int] = []
    stack = [root]
    visited[root] = True
    tree_children: dict[int, list[int]] = {}
    while stack:
        u = stack.pop()
        order.append(u)
        kids = []
        for v in sorted(adj[u], reverse=True):
            if not visited[v]:
                visited[v] = True
                parent[v] = u
                stack.append(v)
                kids.append(v)
        tree_children[u] = sorted(kids)

    pos_of = {u: i for i, u in enumerate(order)}
    ring_at: dict[int, list[tuple[int, int]]] = {u: [] for u in order}
    ring_ids: dict[tuple[int, int], int] = {}
    for u in order:
        for v, o in sorted(adj[u].items()):
            if parent.get(v) == u or parent.get(u) == v:
                continue
            if pos_of[u] < pos_of[v]:
                ring_at[u].append((v, o))
                ring_at[v].append((u, o))

    free_numbers = list(range(99, 0, -1))
    out: list[str] = []

    def emit(u: int):
        out.append(_atom_text(g.atoms[u]))
        for v, o in ring_at[u]:
            key = (min(u, v), max(u, v))
            if key in ring_ids:
                num = ring_ids.pop(key)
                free_numbers.append(num)
            else:
                if not free_numbers:
                    raise ValueError("more than 99 simultaneously open ring bonds")
                num = free_numbers.pop()
                ring_ids[key] = num
            out.append(_ORDER_BOND[o] + (str(num) if num < 10 else f"%{num:02d}"))
        kids = tree_children[u]
        for v in kids[:-1]:
            out.append("(")
            out.append(_ORDER_BOND[adj[u][v]])
            emit(v)
            out.append(")")
        if kids:
            v = kids[-1]
            out.append(_ORDER_BOND[adj[u][v]])
            emit(v)

    emit(root)
    return "".join(out)


def _atom_text(atom: Atom) -> str:
    return f"[{atom.token}]"


# ---------------------------------------------------------------------------
# Dataset files: one SMILES per line, '#' comments and blank lines ignored.

def read_smiles_lines(path) -> list[tuple[int, str]]:
    """(1-based line number, smiles text) pairs from a dataset file."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            entries.append((lineno, line))
    return entries
