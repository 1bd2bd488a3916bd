"""Batching with training-time augmentations, AdamW and the cosine schedule.

Each epoch re-encodes every molecule with a fresh random traversal (when
augmentation is on), re-standardizes its properties and masks a uniformly
drawn number of them, so the model sees every conditioning subset. Training
is deterministic for a fixed seed in single-thread mode.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import vocab as V
from .codec import encode
from .masking import annotate_sequence
from .model import Batch, ModelConfig, NonFiniteLoss, grad
from .properties import (PropertySpec, PropertyVector, mask_properties,
                         sample_mask_count, standardize)
from .vocab import Vocab


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    seed: int = 0
    lam_prop: float = 1.0
    augment_random_order: bool = True
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for b in self.betas:
            if not 0.0 < b < 1.0:
                raise ValueError("betas must lie in (0, 1)")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup (optional) into cosine decay down to zero."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(total_steps - cfg.warmup_steps, 1)
    s = min(step - cfg.warmup_steps, span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * s / span))


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        cfg = self.cfg
        b1, b2 = cfg.betas
        self.t += 1
        if cfg.grad_clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(
                    f"non-finite gradient in {name!r} at optimizer step {self.t}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if cfg.weight_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def adamw_step(params, grads, step: int, cfg: TrainConfig,
               state: AdamW | None = None, lr: float | None = None) -> AdamW:
    """Single functional-style optimizer step (state returned for chaining)."""
    if state is None:
        state = AdamW(cfg)
    state.t = step - 1
    state.step(params, grads, cfg.lr if lr is None else lr)
    return state


# ---------------------------------------------------------------------------
# Batch assembly

@dataclass
class Example:
    graph: object                  # MolGraph
    raw_props: dict


@dataclass
class BatchStats:
    skipped_too_long: int = 0


def encode_example(ex: Example, vocab: Vocab, rng: np.random.Generator | None):
    ids = encode(ex.graph, vocab, rng=rng)
    ring_counts, anchor_positions = annotate_sequence(vocab, ids)
    return ids, ring_counts, anchor_positions


def make_batch(examples: list[Example], vocab: Vocab, spec: PropertySpec,
               cfg: TrainConfig, rng: np.random.Generator, max_len: int,
               stats: BatchStats | None = None) -> Batch | None:
    """Encode, pad and property-mask one batch; None if all examples skipped."""
    encoded = []
    kept: list[Example] = []
    for ex in examples:
        enc_rng = rng if cfg.augment_random_order else None
        ids, rc, ap = encode_example(ex, vocab, enc_rng)
        if len(ids) > max_len:
            if stats is not None:
                stats.skipped_too_long += 1
            continue
        encoded.append((ids, rc, ap))
        kept.append(ex)
    if not encoded:
        return None
    return _assemble_batch(encoded, kept, spec, rng)


def _assemble_batch(encoded, kept: list[Example], spec: PropertySpec,
                    rng: np.random.Generator) -> Batch:
    b = len(encoded)
    span = max(len(ids) for ids, _, _ in encoded)
    a_max = max((max(map(len, ap)) for _, _, ap in encoded), default=0)
    token_ids = np.full((b, span), V.PAD, dtype=np.int64)
    ring_counts = np.zeros((b, span), dtype=np.int64)
    anchor_pos = np.full((b, span, a_max), -1, dtype=np.int64)
    for i, (ids, rc, ap) in enumerate(encoded):
        token_ids[i, :len(ids)] = ids
        ring_counts[i, :len(ids)] = rc
        for t, positions in enumerate(ap):
            for j, p in enumerate(positions):
                anchor_pos[i, t, j] = p

    raw_rows = [ex.raw_props for ex in kept]
    full = standardize(spec, raw_rows)
    target_z = full.cont_z.copy()
    target_present = 1.0 - full.cont_missing
    cards = np.array([p.cardinality for p in spec.categorical], dtype=np.int64)
    if spec.n_categorical:
        target_cat_present = (full.cat_ids < cards[None, :]).astype(np.float64)
        target_cat = np.minimum(full.cat_ids, cards[None, :] - 1)
    else:
        target_cat_present = np.zeros((b, 0))
        target_cat = np.zeros((b, 0), dtype=np.int64)

    pv = full
    for i in range(b):
        t = sample_mask_count(spec.total, rng)
        pv = mask_properties(pv, t, rng, row=i)

    return Batch(token_ids, ring_counts, anchor_pos, pv,
                 target_z, target_present, target_cat, target_cat_present)


# ---------------------------------------------------------------------------
# Training loop

def _epoch_batches(examples, vocab, spec, cfg: TrainConfig, rng, max_len: int,
                   stats: BatchStats):
    """Length-bucketed batches: shuffle, sort inside windows, shuffle batches.

    Similar-length sequences share a batch, which keeps padding (and the
    quadratic attention cost) close to the true token count while staying
    deterministic for a fixed seed.
    """
    order = rng.permutation(len(examples))
    encoded, kept = [], []
    for i in order:
        ex = examples[i]
        enc_rng = rng if cfg.augment_random_order else None
        ids, rc, ap = encode_example(ex, vocab, enc_rng)
        if len(ids) > max_len:
            stats.skipped_too_long += 1
            continue
        encoded.append((ids, rc, ap))
        kept.append(ex)
    window = cfg.batch_size * 8
    idx = np.arange(len(encoded))
    for lo in range(0, len(idx), window):
        hi = min(lo + window, len(idx))
        idx[lo:hi] = idx[lo:hi][np.argsort([len(encoded[i][0]) for i in idx[lo:hi]],
                                           kind="stable")]
    starts = np.arange(0, len(idx), cfg.batch_size)
    rng.shuffle(starts)
    for lo in starts:
        sel = idx[lo:lo + cfg.batch_size]
        if len(sel) == 0:
            continue
        yield _assemble_batch([encoded[i] for i in sel], [kept[i] for i in sel],
                              spec, rng)


def train(params, config: ModelConfig, spec: PropertySpec, vocab: Vocab,
          examples: list[Example], cfg: TrainConfig,
          log_file=None) -> list[dict]:
    """Optimize in place; returns the per-epoch metrics history."""
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(cfg)
    n_batches = max(1, math.ceil(len(examples) / cfg.batch_size))
    total_steps = cfg.epochs * n_batches
    history = []
    stats = BatchStats()
    step = 0
    start = time.monotonic()
    for epoch in range(cfg.epochs):
        ce_sum = mse_sum = cat_sum = 0.0
        n_used = 0
        lr = cfg.lr
        for batch in _epoch_batches(examples, vocab, spec, cfg, rng,
                                    config.max_len, stats):
            lr = lr_at(step, total_steps, cfg)
            try:
                grads, parts = grad(params, config, spec, batch, cfg.lam_prop)
            except NonFiniteLoss as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
            opt.step(params, grads, lr)
            step += 1
            n = batch.token_ids.shape[0]
            ce_sum += parts["token_ce"] * n
            mse_sum += parts["prop_mse"] * n
            cat_sum += parts["prop_cat_ce"] * n
            n_used += n
        record = {
            "epoch": epoch,
            "token_ce": ce_sum / max(n_used, 1),
            "prop_mse": mse_sum / max(n_used, 1),
            "lr": lr,
            "wallclock": time.monotonic() - start,
        }
        if spec.n_categorical:
            record["prop_cat_ce"] = cat_sum / max(n_used, 1)
        if stats.skipped_too_long:
            record["skipped_too_long"] = stats.skipped_too_long
        history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
    return history
