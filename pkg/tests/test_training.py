import math

import numpy as np
import pytest

from molspan import vocab as V
from molspan.codec import decode
from molspan.graph import is_isomorphic
from molspan.model import ModelConfig, init_params
from molspan.properties import fit_spec
from molspan.training import (AdamW, BatchStats, Example, TrainConfig, lr_at,
                              make_batch, train)
from molspan.autograd import Tensor


def corpus_examples(synth_corpus, n=300):
    graphs, props = synth_corpus
    return [Example(graph=g, raw_props=p) for g, p in zip(graphs[:n], props[:n])]


def corpus_spec(examples):
    names = ["molWt", "ring_count"]
    cols = [[ex.raw_props[n] for ex in examples] for n in names]
    return fit_spec(names, ["continuous", "continuous"], cols)


def test_lr_schedule_endpoints():
    cfg = TrainConfig(lr=1e-3)
    assert lr_at(0, 100, cfg) == pytest.approx(1e-3)
    assert lr_at(100, 100, cfg) == pytest.approx(0.0, abs=1e-12)
    assert lr_at(50, 100, cfg) == pytest.approx(0.5e-3)


def test_lr_schedule_warmup():
    cfg = TrainConfig(lr=1e-3, warmup_steps=10)
    assert lr_at(0, 100, cfg) == pytest.approx(1e-4)
    assert lr_at(9, 100, cfg) == pytest.approx(1e-3)
    assert lr_at(10, 100, cfg) == pytest.approx(1e-3)
    assert lr_at(100, 100, cfg) == pytest.approx(0.0, abs=1e-12)


def test_adamw_zero_grad_is_noop():
    cfg = TrainConfig(lr=1e-2, weight_decay=0.0)
    params = {"w": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
    before = params["w"].data.copy()
    opt = AdamW(cfg)
    for _ in range(3):
        opt.step(params, {"w": np.zeros(3)}, lr=1e-2)
    assert np.array_equal(params["w"].data, before)


def test_adamw_matches_hand_computation():
    """Three steps of the AdamW recurrences written out longhand."""
    lr, b1, b2, wd, eps = 0.1, 0.9, 0.95, 0.1, 1e-8
    grads = [0.5, -1.25, 2.0]
    theta = 1.0
    m = v = 0.0
    expect = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta * (1 - lr * wd)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        expect.append(theta)

    cfg = TrainConfig(lr=lr, betas=(b1, b2), weight_decay=wd, adam_eps=eps)
    params = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    opt = AdamW(cfg)
    got = []
    for g in grads:
        opt.step(params, {"w": np.array([g])}, lr=lr)
        got.append(float(params["w"].data[0]))
    assert np.allclose(got, expect, atol=1e-10)


def test_adamw_rejects_nonfinite():
    from molspan.training import TrainingDiverged
    cfg = TrainConfig()
    params = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    with pytest.raises(TrainingDiverged, match="w"):
        AdamW(cfg).step(params, {"w": np.array([np.nan])}, lr=1e-3)


def test_make_batch_deterministic_without_augmentation(synth_corpus, induced_vocab):
    examples = corpus_examples(synth_corpus, 32)
    spec = corpus_spec(examples)
    cfg = TrainConfig(augment_random_order=False)
    a = make_batch(examples, induced_vocab, spec, cfg, np.random.default_rng(0), 90)
    b = make_batch(examples, induced_vocab, spec, cfg, np.random.default_rng(1), 90)
    assert np.array_equal(a.token_ids, b.token_ids)


def test_make_batch_augmented_stays_isomorphic(synth_corpus, induced_vocab):
    examples = corpus_examples(synth_corpus, 16)
    spec = corpus_spec(examples)
    cfg = TrainConfig(augment_random_order=True)
    # roomy budget so nothing is skipped and rows align with the inputs
    a = make_batch(examples, induced_vocab, spec, cfg, np.random.default_rng(0), 200)
    b = make_batch(examples, induced_vocab, spec, cfg, np.random.default_rng(1), 200)
    changed = 0
    for i, ex in enumerate(examples):
        ids_a = [t for t in a.token_ids[i] if t != V.PAD]
        ids_b = [t for t in b.token_ids[i] if t != V.PAD]
        assert is_isomorphic(decode(list(ids_a), induced_vocab), ex.graph)
        assert is_isomorphic(decode(list(ids_b), induced_vocab), ex.graph)
        changed += ids_a != ids_b
    assert changed > 0


def test_make_batch_masking_consistency(synth_corpus, induced_vocab):
    """A masked continuous property always rides as (0.0, flag=1)."""
    examples = corpus_examples(synth_corpus, 64)
    spec = corpus_spec(examples)
    cfg = TrainConfig()
    batch = make_batch(examples, induced_vocab, spec, cfg,
                       np.random.default_rng(3), 90)
    masked = batch.pv.cont_missing == 1.0
    assert np.all(batch.pv.cont_z[masked] == 0.0)
    assert masked.any() and (~masked).any()
    # targets keep the full values regardless of input masking
    assert np.all(batch.target_present == 1.0)


def test_make_batch_skips_long_sequences(synth_corpus, induced_vocab):
    examples = corpus_examples(synth_corpus, 50)
    spec = corpus_spec(examples)
    stats = BatchStats()
    batch = make_batch(examples, induced_vocab, spec, TrainConfig(),
                       np.random.default_rng(0), 12, stats)
    kept = 0 if batch is None else batch.token_ids.shape[0]
    assert kept + stats.skipped_too_long == 50
    assert stats.skipped_too_long > 0


def _tiny_setup(synth_corpus, induced_vocab, n=200, dtype="float32"):
    examples = corpus_examples(synth_corpus, n)
    spec = corpus_spec(examples)
    config = ModelConfig(vocab_size=len(induced_vocab),
                         n_ring_slots=induced_vocab.r_max,
                         max_len=90, d_model=32, n_layers=2, n_heads=2,
                         dtype=dtype)
    return examples, spec, config


def test_train_deterministic(synth_corpus, induced_vocab):
    examples, spec, config = _tiny_setup(synth_corpus, induced_vocab, 100)
    runs = []
    for _ in range(2):
        params = init_params(config, spec, np.random.default_rng(1))
        hist = train(params, config, spec, induced_vocab, examples,
                     TrainConfig(epochs=2, batch_size=32, seed=5))
        runs.append([h["token_ce"] for h in hist])
    assert runs[0] == runs[1]


def test_train_loss_decreases(synth_corpus, induced_vocab):
    examples, spec, config = _tiny_setup(synth_corpus, induced_vocab, 300)
    params = init_params(config, spec, np.random.default_rng(0))
    hist = train(params, config, spec, induced_vocab, examples,
                 TrainConfig(epochs=8, batch_size=64, lr=1e-3, seed=0))
    assert hist[-1]["token_ce"] < hist[0]["token_ce"]
    assert hist[-1]["prop_mse"] < hist[0]["prop_mse"]


def test_lam_zero_leaves_property_head_untouched(synth_corpus, induced_vocab):
    examples, spec, config = _tiny_setup(synth_corpus, induced_vocab, 100)
    params = init_params(config, spec, np.random.default_rng(0))
    head_before = params["prop_out"].data.copy()
    tok_before = params["tok_out"].data.copy()
    train(params, config, spec, induced_vocab, examples,
          TrainConfig(epochs=1, batch_size=32, seed=0, lam_prop=0.0,
                      weight_decay=0.0))
    assert np.array_equal(params["prop_out"].data, head_before)
    assert not np.array_equal(params["tok_out"].data, tok_before)


def test_train_writes_log(tmp_path, synth_corpus, induced_vocab):
    examples, spec, config = _tiny_setup(synth_corpus, induced_vocab, 60)
    params = init_params(config, spec, np.random.default_rng(0))
    log = tmp_path / "log.jsonl"
    with open(log, "w") as fh:
        train(params, config, spec, induced_vocab, examples,
              TrainConfig(epochs=2, batch_size=32, seed=0), log_file=fh)
    import json
    lines = [json.loads(l) for l in log.read_text().splitlines()]
    assert len(lines) == 2
    for rec in lines:
        assert {"epoch", "token_ce", "prop_mse", "lr", "wallclock"} <= set(rec)
