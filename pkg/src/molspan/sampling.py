"""Conditional generation: guided sampling, self-criticism, best-of-k.

Each step runs the model twice, once with the requested conditioning and
once fully unconditional, and combines the raw logits as
``uncond + w * (cond - uncond)`` before the validity mask and softmax are
applied, so guidance can never break the decodability guarantee. Candidates
carry their own RNG streams (derived from the request seed and candidate
index), which keeps results independent of batching and thread scheduling.

Self-criticism re-reads a finished sequence under fully-missing conditioning
and takes the property head at the EOS position; best-of-k keeps the
candidate whose self-predicted properties fall closest to the target in
standardized units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import codec
from . import vocab as V
from .autograd import no_grad
from .masking import annotate_sequence, init_state
from .model import ModelConfig, forward
from .properties import (PropertySpec, PropertyVector, destandardize,
                         standardize)
from .smiles import write_smiles
from .vocab import Vocab


@dataclass
class SampleRequest:
    target: dict                   # raw property values; absent keys = missing
    k: int = 1
    w: float = 1.5
    w_uniform: tuple[float, float] | None = None  # (lo, hi) enables random guidance
    temperature: float = 1.0
    max_len: int = 64
    seed: int = 0
    batch_cap: int = 128

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.w_uniform is None and not self.w > 0:
            raise ValueError("fixed guidance w must be positive")


@dataclass
class Candidate:
    ids: list[int]
    graph: object
    smiles: str
    predicted: dict
    w: float
    self_score: float


@dataclass
class SampleResult:
    best: Candidate
    candidates: list[Candidate] = field(default_factory=list)

    @property
    def self_scores(self) -> list[float]:
        return [c.self_score for c in self.candidates]


def guided_logits(cond: np.ndarray, uncond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance on raw logits: uncond + w * (cond - uncond).

    w=1 and w=0 return the conditional/unconditional logits exactly. Slots
    that are -inf in both inputs (structurally impossible ring ends) come out
    NaN from the general formula; they are forced back to -inf since the
    identity direction is undefined there but the admissible value is not.
    """
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch: {cond.shape} vs {uncond.shape}")
    if w == 1.0:
        return cond.copy()
    if w == 0.0:
        return uncond.copy()
    with np.errstate(invalid="ignore"):
        out = uncond + w * (cond - uncond)
    both_masked = np.isneginf(cond) & np.isneginf(uncond)
    out[both_masked] = -np.inf
    return out


def draw_guidance(w_uniform: tuple[float, float], rng: np.random.Generator) -> float:
    lo, hi = w_uniform
    return float(rng.uniform(lo, hi))


def sample_batch(params, config: ModelConfig, spec: PropertySpec, vocab: Vocab,
                 target_pv: PropertyVector, ws: np.ndarray, temperature: float,
                 max_len: int, rngs: list[np.random.Generator]) -> list[list[int]]:
    """Ancestral sampling of one sequence per row; always completes."""
    b = target_pv.batch_size
    assert len(rngs) == b and ws.shape == (b,)
    states = [init_state(vocab, max_len) for _ in range(b)]
    seqs: list[list[int]] = [[V.BOS] for _ in range(b)]
    ring_tracks: list[list[int]] = [[0] for _ in range(b)]
    anchor_tracks: list[list[list[int]]] = [[[]] for _ in range(b)]
    uncond_pv = PropertyVector.missing(spec, b)
    both_pv = PropertyVector(
        spec,
        np.concatenate([target_pv.cont_z, uncond_pv.cont_z]),
        np.concatenate([target_pv.cont_missing, uncond_pv.cont_missing]),
        np.concatenate([target_pv.cat_ids, uncond_pv.cat_ids]),
    )

    with no_grad():
        while not all(st.finished for st in states):
            span = max(len(s) for s in seqs)
            ids = np.zeros((b, span), dtype=np.int64)
            rings = np.zeros((b, span), dtype=np.int64)
            a_max = max(max(len(a) for a in tr) for tr in anchor_tracks)
            apos = np.full((b, span, a_max), -1, dtype=np.int64)
            for i in range(b):
                n = len(seqs[i])
                ids[i, :n] = seqs[i]
                rings[i, :n] = ring_tracks[i]
                for t, positions in enumerate(anchor_tracks[i]):
                    for j, p in enumerate(positions):
                        apos[i, t, j] = p
            ids2 = np.concatenate([ids, ids])
            rings2 = np.concatenate([rings, rings])
            apos2 = np.concatenate([apos, apos])
            logits_t, _ = forward(params, config, spec, ids2, rings2, apos2, both_pv)
            logits = logits_t.data
            for i, st in enumerate(states):
                if st.finished:
                    continue
                t_last = len(seqs[i]) - 1
                cond = logits[i, t_last].astype(np.float64)
                uncond = logits[b + i, t_last].astype(np.float64)
                g = guided_logits(cond, uncond, float(ws[i]))
                allowed = st.mask()
                g[~allowed] = -np.inf
                if temperature == 0.0:
                    tid = int(np.argmax(g))
                else:
                    z = g / temperature
                    z -= z.max()
                    p = np.exp(z)
                    p /= p.sum()
                    tid = int(rngs[i].choice(len(p), p=p))
                st.advance(tid)
                seqs[i].append(tid)
                ring_tracks[i].append(st.open_anchor_count)
                anchor_tracks[i].append(st.anchor_positions)
    return seqs


def sample_one(params, config: ModelConfig, spec: PropertySpec, vocab: Vocab,
               target: dict, w: float, temperature: float, max_len: int,
               rng: np.random.Generator) -> list[int]:
    pv = standardize(spec, [target])
    return sample_batch(params, config, spec, vocab, pv,
                        np.array([w]), temperature, max_len, [rng])[0]


def self_predict(params, config: ModelConfig, spec: PropertySpec, vocab: Vocab,
                 ids: list[int]) -> dict:
    """Model's own property estimate for a complete sequence (raw units)."""
    return self_predict_many(params, config, spec, vocab, [ids])[0]


def self_predict_many(params, config: ModelConfig, spec: PropertySpec,
                      vocab: Vocab, seqs: list[list[int]]) -> list[dict]:
    for ids in seqs:
        if not ids or ids[-1] != V.EOS:
            raise ValueError("self-prediction needs a complete sequence ending in EOS")
    b = len(seqs)
    span = max(len(s) for s in seqs)
    token_ids = np.full((b, span), V.PAD, dtype=np.int64)
    rings = np.zeros((b, span), dtype=np.int64)
    tracks = [annotate_sequence(vocab, ids) for ids in seqs]
    a_max = max(max(len(a) for a in ap) for _, ap in tracks)
    apos = np.full((b, span, a_max), -1, dtype=np.int64)
    for i, (ids, (rc, ap)) in enumerate(zip(seqs, tracks)):
        token_ids[i, :len(ids)] = ids
        rings[i, :len(ids)] = rc
        for t, positions in enumerate(ap):
            for j, p in enumerate(positions):
                apos[i, t, j] = p
    pv = PropertyVector.missing(spec, b)
    with no_grad():
        _, prop_pred = forward(params, config, spec, token_ids, rings, apos, pv)
    out = []
    for i, ids in enumerate(seqs):
        at_eos = prop_pred.data[i, len(ids) - 1].astype(np.float64)
        raw = {}
        c = spec.n_continuous
        if c:
            values = destandardize(spec, at_eos[:c])
            for j, p in enumerate(spec.continuous):
                raw[p.name] = float(values[j])
        offset = c
        for p in spec.categorical:
            sl = at_eos[offset:offset + p.cardinality]
            raw[p.name] = p.categories[int(np.argmax(sl))]
            offset += p.cardinality
        out.append(raw)
    return out


def self_score(spec: PropertySpec, pred: PropertyVector,
               target: PropertyVector) -> float:
    """Absolute z-space error on the target's present continuous properties
    plus a unit penalty per categorical mismatch; missing targets are free."""
    if pred.spec != target.spec:
        raise ValueError("property spec mismatch")
    score = 0.0
    present = target.cont_missing[0] == 0.0
    score += float(np.abs(pred.cont_z[0] - target.cont_z[0])[present].sum())
    for j, p in enumerate(spec.categorical):
        if target.cat_ids[0, j] != p.cardinality:  # target not missing
            if pred.cat_ids[0, j] != target.cat_ids[0, j]:
                score += 1.0
    return score


def sample_best_of_k(params, config: ModelConfig, spec: PropertySpec,
                     vocab: Vocab, request: SampleRequest) -> SampleResult:
    """Draw k candidates, self-predict each, return the best-scoring one."""
    streams = np.random.SeedSequence(request.seed).spawn(request.k)
    rngs = [np.random.default_rng(s) for s in streams]
    if request.w_uniform is not None:
        ws = np.array([draw_guidance(request.w_uniform, r) for r in rngs])
    else:
        ws = np.full(request.k, request.w, dtype=np.float64)

    target_pv_single = standardize(spec, [request.target])
    candidates: list[Candidate] = []
    for lo in range(0, request.k, request.batch_cap):
        hi = min(lo + request.batch_cap, request.k)
        nb = hi - lo
        pv = PropertyVector(
            spec,
            np.repeat(target_pv_single.cont_z, nb, axis=0),
            np.repeat(target_pv_single.cont_missing, nb, axis=0),
            np.repeat(target_pv_single.cat_ids, nb, axis=0),
        )
        seqs = sample_batch(params, config, spec, vocab, pv, ws[lo:hi],
                            request.temperature, request.max_len, rngs[lo:hi])
        preds = self_predict_many(params, config, spec, vocab, seqs)
        for j, (ids, pred) in enumerate(zip(seqs, preds)):
            graph = codec.decode(ids, vocab)
            pred_pv = standardize(spec, [pred])
            score = self_score(spec, pred_pv, target_pv_single)
            candidates.append(Candidate(
                ids=ids, graph=graph, smiles=write_smiles(graph),
                predicted=pred, w=float(ws[lo + j]), self_score=score,
            ))
    best_idx = min(range(len(candidates)), key=lambda i: candidates[i].self_score)
    return SampleResult(best=candidates[best_idx], candidates=candidates)
