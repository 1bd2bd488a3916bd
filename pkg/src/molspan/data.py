"""Dataset loading, deterministic splits and synthetic-corpus generation.

Datasets are a SMILES text file (one molecule per line, '#' comments) plus
an optional CSV of property columns aligned row-for-row with the molecule
lines. Empty CSV cells mean "missing". Splits are content-hashed so they are
stable under reordering of the input file.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .graph import MolGraph, canonical_key, heavy_atom_count, molecular_weight, ring_count
from .masking import rollout_uniform
from .codec import decode
from .smiles import SmilesError, parse_smiles, read_smiles_lines, write_smiles
from .training import Example
from .vocab import Vocab


class DataError(ValueError):
    pass


@dataclass
class Corpus:
    examples: list[Example]
    smiles: list[str]
    property_names: list[str]
    property_kinds: dict[str, str]
    failures: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.examples)


def load_corpus(smiles_path, props_path=None,
                categorical: frozenset[str] = frozenset(),
                max_failure_fraction: float = 0.01) -> Corpus:
    lines = read_smiles_lines(smiles_path)
    if not lines:
        raise DataError(f"{smiles_path} contains no molecules")

    names: list[str] = []
    rows: list[list[str]] = []
    if props_path is not None:
        with open(props_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                names = [h.strip() for h in next(reader)]
            except StopIteration:
                raise DataError(f"{props_path} is empty") from None
            rows = [row for row in reader]
        if len(rows) != len(lines):
            raise DataError(
                f"{props_path} has {len(rows)} data rows but {smiles_path} "
                f"has {len(lines)} molecules")
    unknown = categorical - set(names)
    if unknown:
        raise DataError(f"--categorical names not in CSV header: {sorted(unknown)}")
    kinds = {n: ("categorical" if n in categorical else "continuous") for n in names}

    examples: list[Example] = []
    smiles_kept: list[str] = []
    failures: list[tuple[int, str]] = []
    for i, (lineno, text) in enumerate(lines):
        try:
            g = parse_smiles(text)
        except SmilesError as exc:
            failures.append((lineno, str(exc)))
            continue
        raw: dict = {}
        if names:
            row = rows[i]
            if len(row) != len(names):
                raise DataError(
                    f"{props_path} row {i + 2}: expected {len(names)} cells, "
                    f"got {len(row)}")
            for name, cell in zip(names, row):
                cell = cell.strip()
                if cell == "":
                    raw[name] = None
                elif kinds[name] == "continuous":
                    try:
                        raw[name] = float(cell)
                    except ValueError:
                        raise DataError(
                            f"{props_path} row {i + 2}: non-numeric value "
                            f"{cell!r} in continuous column {name!r}") from None
                else:
                    raw[name] = cell
        examples.append(Example(graph=g, raw_props=raw))
        smiles_kept.append(text)

    if len(failures) > max_failure_fraction * len(lines):
        sample = "; ".join(f"line {ln}: {m}" for ln, m in failures[:5])
        raise DataError(
            f"{len(failures)}/{len(lines)} molecules failed to parse "
            f"(limit {max_failure_fraction:.0%}): {sample}")
    return Corpus(examples, smiles_kept, names, kinds, failures)


def split_bucket(smiles: str) -> str:
    """Deterministic 90/5/5 split keyed on the molecule text."""
    h = int.from_bytes(hashlib.md5(smiles.encode()).digest()[:8], "little")
    r = h % 100
    if r < 90:
        return "train"
    if r < 95:
        return "valid"
    return "test"


def split_corpus(corpus: Corpus) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {"train": [], "valid": [], "test": []}
    for i, smi in enumerate(corpus.smiles):
        out[split_bucket(smi)].append(i)
    return out


SYNTH_PROPERTIES = ("molWt", "ring_count", "heavy_atom_count")


def synth_properties(g: MolGraph) -> dict:
    return {
        "molWt": round(molecular_weight(g), 4),
        "ring_count": ring_count(g),
        "heavy_atom_count": heavy_atom_count(g),
    }


def generate_synthetic(vocab: Vocab, n: int, max_len: int,
                       seed: int) -> list[tuple[str, dict]]:
    """Uniform-policy rollouts rendered as SMILES with surrogate properties."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ids = rollout_uniform(vocab, max_len, rng)
        g = decode(ids, vocab)
        out.append((write_smiles(g), synth_properties(g)))
    return out


def train_keys(corpus_graphs: list[MolGraph]) -> set[str]:
    return {canonical_key(g) for g in corpus_graphs}
