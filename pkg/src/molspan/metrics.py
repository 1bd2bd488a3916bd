"""Generation quality metrics: validity, uniqueness, novelty, MinMAE, diversity.

Uniqueness partitions the valid samples into isomorphism classes using the
canonical key, with an explicit VF2 check whenever two distinct molecules
land on the same key; a sample is "unique" when it is the first member of
its class. Novelty compares canonical keys against the training set. The
efficiency number is the fraction of samples that are simultaneously valid,
unique and novel.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .graph import (MolGraph, canonical_key, circular_fingerprint,
                    heavy_atom_count, is_isomorphic, molecular_weight,
                    ring_count)

SURROGATE_PROPERTIES = {
    "molWt": molecular_weight,
    "ring_count": ring_count,
    "heavy_atom_count": heavy_atom_count,
}


def compute_property(g: MolGraph, name: str) -> float:
    try:
        fn = SURROGATE_PROPERTIES[name]
    except KeyError:
        raise KeyError(
            f"unknown surrogate property {name!r}; "
            f"available: {sorted(SURROGATE_PROPERTIES)}") from None
    return float(fn(g))


def unique_flags(graphs: list[MolGraph]) -> list[bool]:
    """True where the graph is the first representative of its class."""
    buckets: dict[str, list[MolGraph]] = {}
    flags = []
    for g in graphs:
        key = canonical_key(g)
        reps = buckets.setdefault(key, [])
        if any(is_isomorphic(g, r) for r in reps):
            flags.append(False)
        else:
            reps.append(g)
            flags.append(True)
    return flags


def generative_efficiency(samples: list[MolGraph | None],
                          train_keys: set[str]) -> dict:
    """Validity/uniqueness/novelty ratios and their simultaneous fraction."""
    n = len(samples)
    valid = [g for g in samples if g is not None]
    flags = unique_flags(valid)
    novel = [canonical_key(g) not in train_keys for g in valid]
    n_vun = sum(1 for u, nv in zip(flags, novel) if u and nv)
    counts = {
        "n_samples": n,
        "n_valid": len(valid),
        "n_unique": sum(flags),
        "n_novel": sum(novel),
        "n_valid_unique_novel": n_vun,
    }
    return {
        "counts": counts,
        "validity": len(valid) / n if n else 0.0,
        "uniqueness": sum(flags) / len(valid) if valid else 0.0,
        "novelty": sum(novel) / len(valid) if valid else 0.0,
        "efficiency": n_vun / n if n else 0.0,
    }


def min_mae(samples: list[MolGraph | None], target_raw: float,
            property_name: str) -> float:
    """Minimum |property - target| over valid samples; inf when none valid."""
    best = np.inf
    fn = SURROGATE_PROPERTIES.get(property_name)
    if fn is None:
        raise KeyError(f"unknown surrogate property {property_name!r}")
    for g in samples:
        if g is None:
            continue
        best = min(best, abs(float(fn(g)) - float(target_raw)))
    return best


def internal_diversity(samples: list[MolGraph | None], radius: int = 2,
                       n_bits: int = 2048) -> float:
    """1 - mean pairwise fingerprint similarity over the valid samples."""
    valid = [g for g in samples if g is not None]
    if len(valid) < 2:
        raise ValueError("internal diversity needs at least 2 valid samples")
    words = np.stack([
        circular_fingerprint(g, radius=radius, n_bits=n_bits).words
        for g in valid
    ])
    return 1.0 - K.tanimoto_mean(words)


def evaluation_report(samples: list[MolGraph | None], train_keys: set[str],
                      targets: dict[str, float] | None = None) -> dict:
    """Full JSON-ready evaluation: efficiency block, MinMAE, diversity."""
    report = generative_efficiency(samples, train_keys)
    if targets:
        report["min_mae"] = {
            name: min_mae(samples, value, name) for name, value in targets.items()
        }
    n_valid = report["counts"]["n_valid"]
    report["diversity"] = internal_diversity(samples) if n_valid >= 2 else None
    return report
