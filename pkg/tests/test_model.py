import numpy as np
import pytest

from molspan import vocab as V
from molspan.autograd import Tensor, rmsnorm
from molspan.masking import annotate_sequence, rollout_uniform
from molspan.model import (Batch, CheckpointError, ModelConfig, apply_rope,
                           forward, grad, init_params, load_checkpoint, loss,
                           rope_tables, save_checkpoint)
from molspan.properties import PropertyDef, PropertySpec, PropertyVector, standardize


def toy_spec():
    return PropertySpec((
        PropertyDef("molWt", "continuous", mean=100.0, std=25.0),
        PropertyDef("ring_count", "continuous", mean=1.0, std=0.9),
        PropertyDef("family", "categorical", categories=("x", "y", "z")),
    ))


def toy_config(vocab, dtype="float64", **kw):
    defaults = dict(vocab_size=len(vocab), n_ring_slots=vocab.r_max,
                    max_len=40, d_model=16, n_layers=2, n_heads=2, dtype=dtype)
    defaults.update(kw)
    return ModelConfig(**defaults)


def toy_batch(vocab, spec, n=4, seed=0, max_len=40):
    rng = np.random.default_rng(seed)
    seqs = [rollout_uniform(vocab, max_len - 4, np.random.default_rng(seed + i))
            for i in range(n)]
    span = max(len(s) for s in seqs)
    ids = np.full((n, span), V.PAD, dtype=np.int64)
    rings = np.zeros((n, span), dtype=np.int64)
    tracks = [annotate_sequence(vocab, s) for s in seqs]
    a_max = max(1, max(max(len(a) for a in ap) for _, ap in tracks))
    apos = np.full((n, span, a_max), -1, dtype=np.int64)
    for i, (s, (rc, ap)) in enumerate(zip(seqs, tracks)):
        ids[i, :len(s)] = s
        rings[i, :len(s)] = rc
        for t, positions in enumerate(ap):
            for j, p in enumerate(positions):
                apos[i, t, j] = p
    raw = [{"molWt": float(rng.uniform(50, 200)),
            "ring_count": float(rng.integers(0, 3)),
            "family": "xyz"[int(rng.integers(3))]} for _ in range(n)]
    pv = standardize(spec, raw)
    return Batch(
        token_ids=ids, ring_counts=rings, anchor_pos=apos, pv=pv,
        target_z=pv.cont_z.copy(),
        target_present=1.0 - pv.cont_missing,
        target_cat=np.minimum(pv.cat_ids, 2),
        target_cat_present=np.ones((n, 1)),
    )


@pytest.fixture(scope="module")
def setup(request):
    from molspan.vocab import AtomToken, Vocab
    vocab = Vocab([AtomToken("C", 0, 0, 4), AtomToken("O", 0, 0, 2),
                   AtomToken("C", 0, 3, 1), AtomToken("N", 0, 1, 2)], r_max=8)
    spec = toy_spec()
    config = toy_config(vocab)
    params = init_params(config, spec, np.random.default_rng(7))
    batch = toy_batch(vocab, spec)
    return vocab, spec, config, params, batch


def test_rmsnorm_scale_invariance():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 16))
    gain = Tensor(np.ones(16))
    base = rmsnorm(Tensor(x), gain).data
    scaled = rmsnorm(Tensor(x * 3.0), gain).data
    assert np.allclose(base, scaled, atol=1e-6)


def test_rope_shift_invariance():
    """Rotating all positions by a constant offset preserves q.k scores."""
    rng = np.random.default_rng(1)
    q = rng.standard_normal((1, 1, 6, 8))
    k = rng.standard_normal((1, 1, 6, 8))
    scores = {}
    for offset in (0, 7):
        cos, sin = rope_tables(np.arange(6) + offset, 8, 10000.0, np.float64)
        qr = apply_rope(Tensor(q), cos, sin).data
        kr = apply_rope(Tensor(k), cos, sin).data
        scores[offset] = qr @ kr.swapaxes(-1, -2)
    assert np.allclose(scores[0], scores[7], atol=1e-6)


def test_closed_anchor_slots_are_neg_inf(setup):
    vocab, spec, config, params, batch = setup
    logits, _ = forward(params, config, spec, batch.token_ids,
                        batch.ring_counts, batch.anchor_pos, batch.pv)
    eor = logits.data[:, :, config.eor_base:]
    n_open = (batch.anchor_pos >= 0).sum(axis=2)
    for b in range(eor.shape[0]):
        for t in range(eor.shape[1]):
            k = n_open[b, t]
            assert np.all(np.isinf(eor[b, t, k:])) and np.all(eor[b, t, k:] < 0)
            assert np.all(np.isfinite(eor[b, t, :k]))


def test_property_null_is_bit_exact(setup):
    """With everything masked, raw property values cannot leak into logits."""
    vocab, spec, config, params, batch = setup
    out = []
    for raw in ({"molWt": 1e6, "ring_count": -3.0, "family": "x"},
                {"molWt": -77.0, "ring_count": 9.0, "family": "z"}):
        pv = standardize(spec, [raw] * batch.token_ids.shape[0])
        from molspan.properties import mask_properties
        for row in range(pv.batch_size):
            pv = mask_properties(pv, spec.total, np.random.default_rng(0), row=row)
        assert pv.is_fully_missing()
        logits, prop = forward(params, config, spec, batch.token_ids,
                               batch.ring_counts, batch.anchor_pos, pv)
        out.append((logits.data, prop.data))
    assert np.array_equal(out[0][0], out[1][0])
    assert np.array_equal(out[0][1], out[1][1])


def test_causality_bit_exact(setup):
    vocab, spec, config, params, batch = setup
    ids = batch.token_ids.copy()
    logits, _ = forward(params, config, spec, ids, batch.ring_counts,
                        batch.anchor_pos, batch.pv)
    j = 5
    mutated = ids.copy()
    mutated[:, j] = V.ATOM_BASE  # swap in some other token
    logits2, _ = forward(params, config, spec, mutated, batch.ring_counts,
                         batch.anchor_pos, batch.pv)
    assert np.array_equal(logits.data[:, :j], logits2.data[:, :j])
    assert not np.array_equal(logits.data[:, j:], logits2.data[:, j:])


def test_property_encoder_jacobian(setup):
    """Central finite differences on the conditioning MLP, double precision."""
    vocab, spec, config, params, batch = setup
    from molspan.model import encode_properties

    pv = standardize(spec, [{"molWt": 120.0, "ring_count": 1.0, "family": "y"}])
    h = 1e-5
    weights = np.random.default_rng(3).standard_normal(config.d_model)

    def scalar_out():
        return float(encode_properties(params, config, spec, pv).data[0] @ weights)

    from molspan.model import zero_grads
    zero_grads(params)
    out = (encode_properties(params, config, spec, pv)
           * weights.reshape(1, -1)).sum()
    out.backward()
    for name in ("prop_w1", "prop_w2"):
        tensor = params[name]
        flat = tensor.data.reshape(-1)
        gflat = tensor.grad.reshape(-1)
        idxs = np.random.default_rng(4).choice(flat.size, size=8, replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + h
            up = scalar_out()
            flat[i] = keep - h
            dn = scalar_out()
            flat[i] = keep
            fd = (up - dn) / (2 * h)
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1.0)
            assert rel < 1e-6


def test_loss_lam_zero_is_pure_ce(setup):
    vocab, spec, config, params, batch = setup
    total, parts = loss(params, config, spec, batch, lam_prop=0.0)
    assert float(total.data) == pytest.approx(parts["token_ce"], rel=1e-12)
    # manual cross entropy over non-PAD targets
    logits, _ = forward(params, config, spec, batch.token_ids,
                        batch.ring_counts, batch.anchor_pos, batch.pv)
    lp = logits.data[:, :-1, :]
    m = lp.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    logz = np.log(np.exp(lp - m).sum(axis=-1)) + m[..., 0]
    targets = batch.token_ids[:, 1:]
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    nll = logz - picked
    mask = targets != V.PAD
    assert parts["token_ce"] == pytest.approx(nll[mask].mean(), rel=1e-9)


def test_loss_duplicate_batch_invariance(setup):
    vocab, spec, config, params, batch = setup
    total, _ = loss(params, config, spec, batch, lam_prop=1.0)
    doubled = Batch(
        token_ids=np.concatenate([batch.token_ids] * 2),
        ring_counts=np.concatenate([batch.ring_counts] * 2),
        anchor_pos=np.concatenate([batch.anchor_pos] * 2),
        pv=PropertyVector(spec, np.concatenate([batch.pv.cont_z] * 2),
                          np.concatenate([batch.pv.cont_missing] * 2),
                          np.concatenate([batch.pv.cat_ids] * 2)),
        target_z=np.concatenate([batch.target_z] * 2),
        target_present=np.concatenate([batch.target_present] * 2),
        target_cat=np.concatenate([batch.target_cat] * 2),
        target_cat_present=np.concatenate([batch.target_cat_present] * 2),
    )
    total2, _ = loss(params, config, spec, doubled, lam_prop=1.0)
    assert float(total.data) == pytest.approx(float(total2.data), abs=1e-12)


def test_loss_ignores_extra_padding(setup):
    vocab, spec, config, params, batch = setup
    total, _ = loss(params, config, spec, batch, lam_prop=1.0)
    b, l = batch.token_ids.shape
    pad_ids = np.concatenate(
        [batch.token_ids, np.full((b, 3), V.PAD, dtype=np.int64)], axis=1)
    pad_rings = np.concatenate(
        [batch.ring_counts, np.zeros((b, 3), dtype=np.int64)], axis=1)
    pad_apos = np.concatenate(
        [batch.anchor_pos, np.full((b, 3, batch.anchor_pos.shape[2]), -1,
                                   dtype=np.int64)], axis=1)
    padded = Batch(pad_ids, pad_rings, pad_apos, batch.pv, batch.target_z,
                   batch.target_present, batch.target_cat,
                   batch.target_cat_present)
    total2, _ = loss(params, config, spec, padded, lam_prop=1.0)
    assert float(total.data) == pytest.approx(float(total2.data), rel=1e-10)


def test_gradcheck_small_config(setup):
    """All parameter groups against central differences (h=1e-4, float64)."""
    vocab, spec, _, _, _ = setup
    config = toy_config(vocab, d_model=8, n_layers=1, n_heads=2)
    params = init_params(config, spec, np.random.default_rng(0))
    batch = toy_batch(vocab, spec, n=3, seed=5)
    grads, _ = grad(params, config, spec, batch, lam_prop=1.0)
    h = 1e-4
    rng = np.random.default_rng(6)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        idxs = rng.choice(flat.size, size=min(5, flat.size), replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + h
            up, _ = loss(params, config, spec, batch, 1.0)
            flat[i] = keep - h
            dn, _ = loss(params, config, spec, batch, 1.0)
            flat[i] = keep
            fd = (float(up.data) - float(dn.data)) / (2 * h)
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-2)
            assert rel < 1e-4, (name, i, fd, gflat[i])


def test_checkpoint_roundtrip(tmp_path, setup):
    vocab, spec, config, params, batch = setup
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, config, spec, vocab.digest(), extra={"note": 1})
    loaded, config2, spec2, header = load_checkpoint(path, vocab.digest())
    assert header["extra"]["note"] == 1
    assert config2 == config
    out1, _ = forward(params, config, spec, batch.token_ids, batch.ring_counts,
                      batch.anchor_pos, batch.pv)
    out2, _ = forward(loaded, config2, spec2, batch.token_ids, batch.ring_counts,
                      batch.anchor_pos, batch.pv)
    assert np.array_equal(out1.data, out2.data)


def test_checkpoint_vocab_mismatch(tmp_path, setup):
    vocab, spec, config, params, _ = setup
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, config, spec, vocab.digest())
    with pytest.raises(CheckpointError, match="vocabulary"):
        load_checkpoint(path, "0" * 64)


def test_checkpoint_truncated(tmp_path, setup):
    vocab, spec, config, params, _ = setup
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, config, spec, vocab.digest())
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"JUNK" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_legacy_arch_runs_and_differs(setup):
    vocab, spec, _, _, batch = setup
    rng_seed = 9
    modern_cfg = toy_config(vocab)
    legacy_cfg = toy_config(vocab, legacy_arch=True)
    modern = init_params(modern_cfg, spec, np.random.default_rng(rng_seed))
    legacy = init_params(legacy_cfg, spec, np.random.default_rng(rng_seed))
    assert "pos_emb" in legacy and "pos_emb" not in modern
    out_m, _ = forward(modern, modern_cfg, spec, batch.token_ids,
                       batch.ring_counts, batch.anchor_pos, batch.pv)
    out_l, _ = forward(legacy, legacy_cfg, spec, batch.token_ids,
                       batch.ring_counts, batch.anchor_pos, batch.pv)
    assert out_m.shape == out_l.shape
    assert not np.allclose(out_m.data[np.isfinite(out_m.data)],
                           out_l.data[np.isfinite(out_l.data)])
    grads, _ = grad(legacy, legacy_cfg, spec, batch, 1.0)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_single_layer_prop_encoder(setup):
    vocab, spec, _, _, batch = setup
    cfg = toy_config(vocab, prop_encoder_layers=1)
    params = init_params(cfg, spec, np.random.default_rng(2))
    assert "prop_w2" not in params
    out, _ = forward(params, cfg, spec, batch.token_ids, batch.ring_counts,
                     batch.anchor_pos, batch.pv)
    assert np.all(np.isfinite(out.data[:, :, :cfg.eor_base]))


def test_config_validation(setup):
    vocab, *_ = setup
    with pytest.raises(ValueError):
        toy_config(vocab, d_model=15)
    with pytest.raises(ValueError):
        toy_config(vocab, d_model=16, n_heads=16)  # odd head dim
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, n_ring_slots=2, max_len=8, dropout=0.5)
