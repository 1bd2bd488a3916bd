"""Conditional transformer over spanning-tree token sequences.

Inputs per position: token embedding + open-ring-count embedding + a single
property embedding broadcast across positions. The default stack is pre-norm
with RMS normalization, rotary positions on Q/K, SwiGLU feed-forward
(expansion 2) and no bias terms anywhere; residual output projections are
initialized with a 1/sqrt(2·n_layers) scale. A ``legacy_arch`` variant swaps
in LayerNorm, learned absolute positions and a GELU feed-forward for
ablations.

The output head splits in two: next-token logits and a property prediction
at every position. Ring-end token logits are not produced by the linear
head; they come from a similarity head, the scaled dot product between the
current hidden state and the hidden states at the open ring anchors'
[bor] positions. Ring-end slots without an open anchor get -inf.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import vocab as V
from .autograd import (Tensor, anchor_similarity, concat, embedding,
                       gather_last, log_softmax_last, rmsnorm, softmax_last,
                       tensor, where)
from .properties import PropertySpec, PropertyVector

NEG_INF = -np.inf


class NonFiniteLoss(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    n_ring_slots: int
    max_len: int
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    ffn_expansion: int = 2
    rope_base: float = 10000.0
    dropout: float = 0.0
    dtype: str = "float32"
    legacy_arch: bool = False
    prop_encoder_layers: int = 2
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary positions")
        if self.dropout != 0.0:
            raise ValueError("dropout is fixed at 0")
        if self.prop_encoder_layers not in (1, 2):
            raise ValueError("prop_encoder_layers must be 1 or 2")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def eor_base(self) -> int:
        return self.vocab_size - self.n_ring_slots


@dataclass
class Batch:
    token_ids: np.ndarray          # [B, L] with BOS first, PAD tail
    ring_counts: np.ndarray        # [B, L]
    anchor_pos: np.ndarray         # [B, L, A], -1 = unused slot
    pv: PropertyVector             # conditioning inputs (after masking)
    target_z: np.ndarray           # [B, C] standardized property targets
    target_present: np.ndarray     # [B, C] 1.0 where the target is known
    target_cat: np.ndarray         # [B, K]
    target_cat_present: np.ndarray  # [B, K]


def init_params(config: ModelConfig, spec: PropertySpec,
                rng: np.random.Generator) -> dict[str, Tensor]:
    dt = config.np_dtype
    d = config.d_model
    resid_scale = 1.0 / np.sqrt(2.0 * config.n_layers)

    def normal(*shape, scale=0.02):
        return Tensor((rng.standard_normal(shape) * scale).astype(dt),
                      requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    params: dict[str, Tensor] = {
        "tok_emb": normal(config.vocab_size, d),
        "ring_emb": normal(config.n_ring_slots + 1, d),
        "prop_w1": normal(2 * spec.n_continuous, d),
    }
    if config.prop_encoder_layers == 2:
        params["prop_w2"] = normal(d, d)
    for p in spec.categorical:
        params[f"cat_emb_{p.name}"] = normal(p.cardinality + 1, d)
    if config.legacy_arch:
        params["pos_emb"] = normal(config.max_len, d)

    h = config.ffn_expansion * d
    for i in range(config.n_layers):
        params[f"blk{i}_attn_norm"] = ones(d)
        params[f"blk{i}_wq"] = normal(d, d)
        params[f"blk{i}_wk"] = normal(d, d)
        params[f"blk{i}_wv"] = normal(d, d)
        params[f"blk{i}_wo"] = normal(d, d, scale=0.02 * resid_scale)
        params[f"blk{i}_ffn_norm"] = ones(d)
        params[f"blk{i}_ffn_w1"] = normal(d, h)
        if not config.legacy_arch:
            params[f"blk{i}_ffn_w3"] = normal(d, h)
        params[f"blk{i}_ffn_w2"] = normal(h, d, scale=0.02 * resid_scale)
        if config.legacy_arch:
            params[f"blk{i}_attn_norm_b"] = zeros(d)
            params[f"blk{i}_ffn_norm_b"] = zeros(d)
    params["final_norm"] = ones(d)
    if config.legacy_arch:
        params["final_norm_b"] = zeros(d)
    params["tok_out"] = normal(d, config.eor_base)
    p_out = spec.n_continuous + sum(p.cardinality for p in spec.categorical)
    params["prop_out"] = normal(d, max(p_out, 1))
    return params


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Forward pieces

def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype):
    """cos/sin tables [L, head_dim/2] for the given absolute positions."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved (even, odd) feature pairs; x is [B, H, L, hd]."""
    b, h, l, hd = x.shape
    even = x[..., 0::2]
    odd = x[..., 1::2]
    r_even = even * cos - odd * sin
    r_odd = even * sin + odd * cos
    paired = concat([r_even.reshape(b, h, l, hd // 2, 1),
                     r_odd.reshape(b, h, l, hd // 2, 1)], axis=-1)
    return paired.reshape(b, h, l, hd)


def _layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    m = x.mean(axis=-1, keepdims=True)
    xc = x - m
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + eps) ** -0.5 * gain + bias


def _gelu(x: Tensor) -> Tensor:
    c = float(np.sqrt(2.0 / np.pi))
    return x * 0.5 * ((c * (x + x * x * x * 0.044715)).tanh() + 1.0)


def encode_properties(params: dict[str, Tensor], config: ModelConfig,
                      spec: PropertySpec, pv: PropertyVector) -> Tensor:
    """Property conditioning vector [B, d_model]."""
    dt = config.np_dtype
    feats = tensor(np.concatenate([pv.cont_z, pv.cont_missing], axis=1), dtype=dt)
    h = feats @ params["prop_w1"]
    if config.prop_encoder_layers == 2:
        h = h.silu() @ params["prop_w2"]
    for j, p in enumerate(spec.categorical):
        h = h + embedding(params[f"cat_emb_{p.name}"], pv.cat_ids[:, j])
    return h


def forward(params: dict[str, Tensor], config: ModelConfig, spec: PropertySpec,
            token_ids: np.ndarray, ring_counts: np.ndarray,
            anchor_pos: np.ndarray, pv: PropertyVector
            ) -> tuple[Tensor, Tensor]:
    """Next-token logits [B, L, V] and property predictions [B, L, P]."""
    b, l = token_ids.shape
    if l > config.max_len:
        raise ValueError(f"sequence length {l} exceeds max_len {config.max_len}")
    dt = config.np_dtype
    d, nh, hd = config.d_model, config.n_heads, config.head_dim

    x = embedding(params["tok_emb"], token_ids)
    ring_idx = np.clip(ring_counts, 0, config.n_ring_slots)
    x = x + embedding(params["ring_emb"], ring_idx)
    prop_vec = encode_properties(params, config, spec, pv)
    x = x + prop_vec.reshape(b, 1, d)
    if config.legacy_arch:
        x = x + params["pos_emb"][0:l]

    positions = np.arange(l)
    cos, sin = rope_tables(positions, hd, config.rope_base, dt)
    causal = np.tril(np.ones((l, l), dtype=bool))[None, None]
    scale = 1.0 / np.sqrt(hd)

    for i in range(config.n_layers):
        if config.legacy_arch:
            hn = _layernorm(x, params[f"blk{i}_attn_norm"],
                            params[f"blk{i}_attn_norm_b"], config.norm_eps)
        else:
            hn = rmsnorm(x, params[f"blk{i}_attn_norm"], config.norm_eps)
        q = (hn @ params[f"blk{i}_wq"]).reshape(b, l, nh, hd).transpose(0, 2, 1, 3)
        k = (hn @ params[f"blk{i}_wk"]).reshape(b, l, nh, hd).transpose(0, 2, 1, 3)
        v = (hn @ params[f"blk{i}_wv"]).reshape(b, l, nh, hd).transpose(0, 2, 1, 3)
        if not config.legacy_arch:
            q = apply_rope(q, cos, sin)
            k = apply_rope(k, cos, sin)
        scores = (q @ k.swapaxes(-1, -2)) * scale
        scores = where(causal, scores, np.asarray(NEG_INF, dtype=dt))
        attn = softmax_last(scores)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, l, d)
        x = x + ctx @ params[f"blk{i}_wo"]

        if config.legacy_arch:
            hn = _layernorm(x, params[f"blk{i}_ffn_norm"],
                            params[f"blk{i}_ffn_norm_b"], config.norm_eps)
            ff = _gelu(hn @ params[f"blk{i}_ffn_w1"]) @ params[f"blk{i}_ffn_w2"]
        else:
            hn = rmsnorm(x, params[f"blk{i}_ffn_norm"], config.norm_eps)
            ff = ((hn @ params[f"blk{i}_ffn_w1"]).silu()
                  * (hn @ params[f"blk{i}_ffn_w3"])) @ params[f"blk{i}_ffn_w2"]
        x = x + ff

    if config.legacy_arch:
        h = _layernorm(x, params["final_norm"], params["final_norm_b"],
                       config.norm_eps)
    else:
        h = rmsnorm(x, params["final_norm"], config.norm_eps)

    lin_logits = h @ params["tok_out"]                      # [B, L, V - R]
    a = anchor_pos.shape[-1]
    sim = anchor_similarity(h, anchor_pos)                  # [B, L, A]
    ring_valid = where(anchor_pos >= 0, sim, np.asarray(NEG_INF, dtype=dt))
    pad_width = config.n_ring_slots - a
    if pad_width:
        pad = tensor(np.full((b, l, pad_width), NEG_INF, dtype=dt))
        ring_block = concat([ring_valid, pad], axis=-1)
    else:
        ring_block = ring_valid
    logits = concat([lin_logits, ring_block], axis=-1)      # [B, L, V]
    prop_pred = h @ params["prop_out"]
    return logits, prop_pred


def loss(params: dict[str, Tensor], config: ModelConfig, spec: PropertySpec,
         batch: Batch, lam_prop: float = 1.0
         ) -> tuple[Tensor, dict[str, float]]:
    """Mean next-token CE plus lam_prop * dense property loss."""
    dt = config.np_dtype
    logits, prop_pred = forward(params, config, spec, batch.token_ids,
                                batch.ring_counts, batch.anchor_pos, batch.pv)

    targets = batch.token_ids[:, 1:]
    tok_mask = (targets != V.PAD).astype(dt)
    lp = log_softmax_last(logits[:, :-1, :])
    nll = -gather_last(lp, targets)
    denom = max(float(tok_mask.sum()), 1.0)
    token_ce = (nll * tok_mask).sum() * (1.0 / denom)

    pos_mask = (batch.token_ids != V.PAD).astype(dt)        # [B, L]
    c = spec.n_continuous
    parts = {"token_ce": float(token_ce.data)}

    prop_terms = []
    if c:
        pred_c = prop_pred[:, :, 0:c]
        tz = batch.target_z.astype(dt)[:, None, :]
        w = pos_mask[:, :, None] * batch.target_present.astype(dt)[:, None, :]
        diff = pred_c - tz
        denom_c = max(float(w.sum()), 1.0)
        mse = (diff * diff * w).sum() * (1.0 / denom_c)
        prop_terms.append(mse)
        parts["prop_mse"] = float(mse.data)
    else:
        parts["prop_mse"] = 0.0

    if spec.n_categorical:
        total_nll = None
        total_count = 0.0
        offset = c
        for j, p in enumerate(spec.categorical):
            sl = prop_pred[:, :, offset:offset + p.cardinality]
            offset += p.cardinality
            lp_k = log_softmax_last(sl)
            tgt = np.broadcast_to(batch.target_cat[:, j:j + 1],
                                  pos_mask.shape).copy()
            w_k = pos_mask * batch.target_cat_present.astype(dt)[:, j:j + 1]
            nll_k = (-gather_last(lp_k, tgt) * w_k).sum()
            total_nll = nll_k if total_nll is None else total_nll + nll_k
            total_count += float(w_k.sum())
        cat_ce = total_nll * (1.0 / max(total_count, 1.0))
        prop_terms.append(cat_ce)
        parts["prop_cat_ce"] = float(cat_ce.data)
    else:
        parts["prop_cat_ce"] = 0.0

    total = token_ce
    if prop_terms and lam_prop != 0.0:
        prop_loss = prop_terms[0]
        for t in prop_terms[1:]:
            prop_loss = prop_loss + t
        total = total + lam_prop * prop_loss
    if not np.isfinite(total.data):
        raise NonFiniteLoss(f"loss became non-finite: {parts}")
    parts["loss"] = float(total.data)
    return total, parts


def grad(params: dict[str, Tensor], config: ModelConfig, spec: PropertySpec,
         batch: Batch, lam_prop: float = 1.0
         ) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Exact gradients of :func:`loss` for every parameter."""
    zero_grads(params)
    total, parts = loss(params, config, spec, batch, lam_prop)
    total.backward()
    grads = {}
    for name, p in params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads, parts


# ---------------------------------------------------------------------------
# Checkpoints: little-endian binary, JSON header + named raw tensors.

MAGIC = b"MSPN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], config: ModelConfig,
                    spec: PropertySpec, vocab_digest: str,
                    extra: dict | None = None) -> None:
    names = sorted(params)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "prop_spec": spec.to_json(),
        "vocab_digest": vocab_digest,
        "extra": extra or {},
        "tensors": [
            {
                "name": n,
                "shape": list(params[n].data.shape),
                "dtype": str(params[n].data.dtype),
            }
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            arr = params[n].data
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path, expected_vocab_digest: str | None = None
                    ) -> tuple[dict[str, Tensor], ModelConfig, PropertySpec, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a molspan checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {header.get('version')!r} unsupported")
        if (expected_vocab_digest is not None
                and header["vocab_digest"] != expected_vocab_digest):
            raise CheckpointError(
                "checkpoint was trained against a different vocabulary "
                f"(digest {header['vocab_digest'][:12]}..., "
                f"expected {expected_vocab_digest[:12]}...)")
        config = ModelConfig(**header["config"])
        spec = PropertySpec.from_json(header["prop_spec"])
        params: dict[str, Tensor] = {}
        for t in header["tensors"]:
            dtype = np.dtype(t["dtype"]).newbyteorder("<")
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError("checkpoint truncated")
            arr = np.frombuffer(raw, dtype=dtype).reshape(t["shape"])
            params[t["name"]] = Tensor(
                arr.astype(np.dtype(t["dtype"])), requires_grad=True)
    return params, config, spec, header
