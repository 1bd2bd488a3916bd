"""Token inventory induced from a corpus.

Atom tokens bundle (element, charge, h_count); their maximum valency is the
largest bond-order sum observed for that signature anywhere in the corpus.
Token ids are dense and deterministic:

    0 BOS | 1 EOS | 2 PAD | 3 "(" | 4 ")" | 5 "." | 6 "[bor]"
    7 "-" | 8 "=" | 9 "#" | 10.. atom tokens (lexicographic)
    last r_max ids: "[eor-1]" .. "[eor-r_max]"

Keeping the ring-end block contiguous at the end of the id space lets the
model emit it from the similarity head as a single concatenated slice.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .graph import MolGraph, weighted_degree

BOS, EOS, PAD = 0, 1, 2
OPEN_ID, CLOSE_ID, DOT_ID, BOR_ID = 3, 4, 5, 6
BOND_IDS = (7, 8, 9)  # orders 1, 2, 3
ATOM_BASE = 10

# Token kinds, used by the codec and the mask engine.
K_BOS, K_EOS, K_PAD, K_OPEN, K_CLOSE, K_DOT, K_BOR, K_BOND, K_ATOM, K_EOR = range(10)

VOCAB_FORMAT = "molspan-vocab"
VOCAB_VERSION = 1


@dataclass(frozen=True)
class AtomToken:
    element: str
    charge: int
    h_count: int
    max_valency: int

    @property
    def token(self) -> str:
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


class Vocab:
    def __init__(self, atom_tokens: list[AtomToken], r_max: int = 100):
        if not atom_tokens:
            raise ValueError("vocabulary needs at least one atom token")
        if r_max < 1:
            raise ValueError("r_max must be positive")
        self.atom_tokens = sorted(atom_tokens, key=lambda t: t.token)
        self.r_max = r_max
        self.n_atoms = len(self.atom_tokens)
        self.eor_base = ATOM_BASE + self.n_atoms
        self.size = self.eor_base + r_max

        self.tokens: list[str] = (
            ["[bos]", "[eos]", "[pad]", "(", ")", ".", "[bor]", "-", "=", "#"]
            + [t.token for t in self.atom_tokens]
            + [f"[eor-{i}]" for i in range(1, r_max + 1)]
        )
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.signature_to_id = {
            (t.element, t.charge, t.h_count): ATOM_BASE + i
            for i, t in enumerate(self.atom_tokens)
        }
        self.atom_valency = np.array([t.max_valency for t in self.atom_tokens], dtype=np.int64)
        self.max_atom_valency = int(self.atom_valency.max())

        kinds = np.empty(self.size, dtype=np.int8)
        kinds[BOS], kinds[EOS], kinds[PAD] = K_BOS, K_EOS, K_PAD
        kinds[OPEN_ID], kinds[CLOSE_ID], kinds[DOT_ID], kinds[BOR_ID] = (
            K_OPEN, K_CLOSE, K_DOT, K_BOR)
        for b in BOND_IDS:
            kinds[b] = K_BOND
        kinds[ATOM_BASE:self.eor_base] = K_ATOM
        kinds[self.eor_base:] = K_EOR
        self.kinds = kinds

    # -- lookups ------------------------------------------------------------

    def id_of(self, token: str) -> int:
        return self.token_to_id[token]

    def atom_id(self, element: str, charge: int, h_count: int) -> int:
        try:
            return self.signature_to_id[(element, charge, h_count)]
        except KeyError:
            raise KeyError(
                f"atom signature ({element}, {charge}, {h_count}) not in vocabulary"
            ) from None

    def atom_token_of(self, token_id: int) -> AtomToken:
        return self.atom_tokens[token_id - ATOM_BASE]

    def valency_of(self, token_id: int) -> int:
        return int(self.atom_valency[token_id - ATOM_BASE])

    def bond_order(self, token_id: int) -> int:
        return token_id - BOND_IDS[0] + 1

    def bond_id(self, order: int) -> int:
        return BOND_IDS[order - 1]

    def eor_id(self, i: int) -> int:
        """Token id closing the i-th currently-open anchor (oldest = 1)."""
        if not 1 <= i <= self.r_max:
            raise ValueError(f"ring-end index {i} outside 1..{self.r_max}")
        return self.eor_base + i - 1

    def eor_index(self, token_id: int) -> int:
        return token_id - self.eor_base + 1

    def kind(self, token_id: int) -> int:
        return int(self.kinds[token_id])

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocab)
            and self.r_max == other.r_max
            and self.atom_tokens == other.atom_tokens
        )

    # -- persistence ---------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format": VOCAB_FORMAT,
            "version": VOCAB_VERSION,
            "r_max": self.r_max,
            "atom_tokens": [
                {
                    "token": t.token,
                    "element": t.element,
                    "charge": t.charge,
                    "h_count": t.h_count,
                    "max_valency": t.max_valency,
                }
                for t in self.atom_tokens
            ],
            "token_order": self.tokens,
        }

    def digest(self) -> str:
        payload = {k: v for k, v in self.to_json().items() if k != "token_order"}
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode()
        ).hexdigest()


def induce_vocab(corpus, r_max: int = 100) -> Vocab:
    """One atom token per distinct signature; valency from the corpus maximum."""
    best: dict[tuple[str, int, int], int] = {}
    empty = True
    for g in corpus:
        empty = False
        for i, atom in enumerate(g.atoms):
            deg = weighted_degree(g, i)
            sig = atom.signature
            if deg > best.get(sig, -1):
                best[sig] = deg
    if empty:
        raise ValueError("cannot induce a vocabulary from an empty corpus")
    tokens = [
        AtomToken(element=e, charge=c, h_count=h, max_valency=v)
        for (e, c, h), v in best.items()
    ]
    return Vocab(tokens, r_max=r_max)


def save_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(vocab.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


class VocabFileError(ValueError):
    pass


def load_vocab(path) -> Vocab:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise VocabFileError(f"malformed vocabulary file {path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("format") != VOCAB_FORMAT:
        raise VocabFileError(f"{path} is not a vocabulary file")
    if data.get("version") != VOCAB_VERSION:
        raise VocabFileError(
            f"vocabulary version mismatch: file has {data.get('version')!r}, "
            f"expected {VOCAB_VERSION}"
        )
    try:
        tokens = [
            AtomToken(
                element=t["element"],
                charge=int(t["charge"]),
                h_count=int(t["h_count"]),
                max_valency=int(t["max_valency"]),
            )
            for t in data["atom_tokens"]
        ]
        return Vocab(tokens, r_max=int(data["r_max"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise VocabFileError(f"malformed vocabulary file {path}: {exc}") from exc


def default_seed_vocab(r_max: int = 100) -> Vocab:
    """Hand-specified organic starter vocabulary for synthetic corpora."""
    spec = [
        ("C", 0, 0, 4), ("C", 0, 1, 3), ("C", 0, 2, 2), ("C", 0, 3, 1), ("C", 0, 4, 0),
        ("N", 0, 0, 3), ("N", 0, 1, 2), ("N", 0, 2, 1),
        ("O", 0, 0, 2), ("O", 0, 1, 1), ("O", 0, 2, 0),
        ("F", 0, 0, 1),
        ("Na", 1, 0, 0), ("Cl", -1, 0, 0),
    ]
    return Vocab([AtomToken(*s) for s in spec], r_max=r_max)
