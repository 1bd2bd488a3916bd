"""Declared properties, z-score standardization and random masking.

Continuous properties travel as (standardized value, missing flag) pairs: a
missing property is stored as value 0 with flag 1, so the network can tell
"unconditioned" apart from "conditioned on the mean". Categorical properties
get an extra category id for missing. During training the number of masked
properties is drawn uniformly from {0..T}, which is what lets one model serve
any conditioning subset, including the fully-unconditional case used for
classifier-free guidance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PropertyDef:
    name: str
    kind: str  # "continuous" | "categorical"
    mean: float = 0.0
    std: float = 1.0
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ValueError(f"unknown property kind {self.kind!r}")
        if self.kind == "continuous" and not self.std > 0:
            raise ValueError(f"property {self.name!r} needs std > 0")
        if self.kind == "categorical" and not self.categories:
            raise ValueError(f"categorical property {self.name!r} has no categories")

    @property
    def cardinality(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class PropertySpec:
    properties: tuple[PropertyDef, ...]

    def __post_init__(self):
        names = [p.name for p in self.properties]
        if len(set(names)) != len(names):
            raise ValueError("duplicate property names")

    @property
    def continuous(self) -> tuple[PropertyDef, ...]:
        return tuple(p for p in self.properties if p.kind == "continuous")

    @property
    def categorical(self) -> tuple[PropertyDef, ...]:
        return tuple(p for p in self.properties if p.kind == "categorical")

    @property
    def n_continuous(self) -> int:
        return len(self.continuous)

    @property
    def n_categorical(self) -> int:
        return len(self.categorical)

    @property
    def total(self) -> int:
        return len(self.properties)

    def to_json(self) -> dict:
        return {
            "format": "molspan-props",
            "version": 1,
            "properties": [
                {
                    "name": p.name,
                    "kind": p.kind,
                    **({"mean": p.mean, "std": p.std} if p.kind == "continuous"
                       else {"categories": list(p.categories)}),
                }
                for p in self.properties
            ],
        }

    @staticmethod
    def from_json(data: dict) -> "PropertySpec":
        if data.get("format") != "molspan-props" or data.get("version") != 1:
            raise ValueError("not a molspan property-spec file")
        defs = []
        for p in data["properties"]:
            if p["kind"] == "continuous":
                defs.append(PropertyDef(p["name"], "continuous",
                                        mean=float(p["mean"]), std=float(p["std"])))
            else:
                defs.append(PropertyDef(p["name"], "categorical",
                                        categories=tuple(p["categories"])))
        return PropertySpec(tuple(defs))


def save_spec(spec: PropertySpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_spec(path) -> PropertySpec:
    with open(path, encoding="utf-8") as fh:
        return PropertySpec.from_json(json.load(fh))


def fit_spec(names: list[str], kinds: list[str],
             columns: list[list]) -> PropertySpec:
    """Fit means/stds (and category sets) from training-split columns.

    ``columns[i]`` holds raw values for property i; None marks missing.
    """
    defs = []
    for name, kind, col in zip(names, kinds, columns):
        present = [v for v in col if v is not None]
        if not present:
            raise ValueError(f"property {name!r} has no observed values")
        if kind == "continuous":
            arr = np.asarray(present, dtype=np.float64)
            std = float(arr.std())
            if std <= 0:
                raise ValueError(f"property {name!r} is constant; std must be > 0")
            defs.append(PropertyDef(name, "continuous", mean=float(arr.mean()), std=std))
        else:
            cats = tuple(sorted({str(v) for v in present}))
            defs.append(PropertyDef(name, "categorical", categories=cats))
    return PropertySpec(tuple(defs))


@dataclass
class PropertyVector:
    """A batch of property conditionings in model units.

    cont_z:       [B, C] standardized values (0 where missing)
    cont_missing: [B, C] 1.0 where missing
    cat_ids:      [B, K] category index, or cardinality for missing
    """

    spec: PropertySpec
    cont_z: np.ndarray
    cont_missing: np.ndarray
    cat_ids: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.cont_z.shape[0]

    def copy(self) -> "PropertyVector":
        return PropertyVector(self.spec, self.cont_z.copy(),
                              self.cont_missing.copy(), self.cat_ids.copy())

    @staticmethod
    def missing(spec: PropertySpec, batch_size: int = 1) -> "PropertyVector":
        c, k = spec.n_continuous, spec.n_categorical
        if k:
            cards = np.array([p.cardinality for p in spec.categorical], dtype=np.int64)
            cat_ids = np.tile(cards, (batch_size, 1))
        else:
            cat_ids = np.zeros((batch_size, 0), dtype=np.int64)
        return PropertyVector(
            spec,
            np.zeros((batch_size, c)),
            np.ones((batch_size, c)),
            cat_ids,
        )

    def is_fully_missing(self) -> bool:
        cards = np.array([p.cardinality for p in self.spec.categorical], dtype=np.int64)
        return bool(self.cont_missing.all()) and bool((self.cat_ids == cards).all())


def standardize(spec: PropertySpec, raw_rows: list[dict]) -> PropertyVector:
    """Raw value dicts -> standardized batch; absent/None/NaN keys are missing."""
    b = len(raw_rows)
    c, k = spec.n_continuous, spec.n_categorical
    cont_z = np.zeros((b, c))
    cont_missing = np.ones((b, c))
    cat_ids = np.zeros((b, k), dtype=np.int64)
    for i, row in enumerate(raw_rows):
        for j, p in enumerate(spec.continuous):
            v = row.get(p.name)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                continue
            cont_z[i, j] = (float(v) - p.mean) / p.std
            cont_missing[i, j] = 0.0
        for j, p in enumerate(spec.categorical):
            v = row.get(p.name)
            if v is None:
                cat_ids[i, j] = p.cardinality
            else:
                try:
                    cat_ids[i, j] = p.categories.index(str(v))
                except ValueError:
                    raise ValueError(
                        f"unknown category {v!r} for property {p.name!r}") from None
    return PropertyVector(spec, cont_z, cont_missing, cat_ids)


def destandardize(spec: PropertySpec, z_values: np.ndarray) -> np.ndarray:
    """Inverse of the continuous z-scoring; exact."""
    means = np.array([p.mean for p in spec.continuous])
    stds = np.array([p.std for p in spec.continuous])
    return z_values * stds + means


def sample_mask_count(total: int, rng: np.random.Generator) -> int:
    """Number of properties to mask, uniform on {0..total}."""
    return int(rng.integers(0, total + 1))


def mask_properties(pv: PropertyVector, t: int, rng: np.random.Generator,
                    row: int = 0) -> PropertyVector:
    """Mask t distinct properties (continuous and categorical pooled) in one row."""
    spec = pv.spec
    if not 0 <= t <= spec.total:
        raise ValueError(f"cannot mask {t} of {spec.total} properties")
    out = pv.copy()
    chosen = rng.choice(spec.total, size=t, replace=False)
    c = spec.n_continuous
    for idx in chosen:
        if idx < c:
            out.cont_z[row, idx] = 0.0
            out.cont_missing[row, idx] = 1.0
        else:
            j = idx - c
            out.cat_ids[row, j] = spec.categorical[j].cardinality
    return out
