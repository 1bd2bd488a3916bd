import numpy as np
import pytest

from molspan import vocab as V
from molspan.codec import (DecodeError, EncodeError, decode, encode,
                           text_to_tokens, tokens_to_text)
from molspan.graph import connected_components, is_isomorphic
from molspan.vocab import induce_vocab


def test_encode_methane(methane):
    v = induce_vocab([methane])
    ids = encode(methane, v)
    assert ids == [V.BOS, v.id_of("CH4"), V.EOS]
    assert is_isomorphic(decode(ids, v), methane)


def test_encode_salt(nacl, induced_vocab):
    ids = encode(nacl, induced_vocab)
    text = tokens_to_text(ids, induced_vocab)
    assert text == "[bos] Na+ . Cl- [eos]"


def test_encode_cyclohexane_trace(cyclohexane, induced_vocab):
    """Canonical six-ring encoding: anchor at the root, closure at the end."""
    ids = encode(cyclohexane, induced_vocab)
    expected = "[bos] CH2 [bor] - CH2 - CH2 - CH2 - CH2 - CH2 - [eor-1] [eos]"
    assert tokens_to_text(ids, induced_vocab) == expected


def test_decode_inverse_of_encode(synth_corpus, induced_vocab):
    graphs, _ = synth_corpus
    rng = np.random.default_rng(3)
    for g in graphs[:100]:
        for _ in range(5):
            ids = encode(g, induced_vocab, rng=rng)
            assert is_isomorphic(decode(ids, induced_vocab), g)


def test_encode_deterministic(synth_corpus, induced_vocab):
    graphs, _ = synth_corpus
    g = graphs[7]
    a = encode(g, induced_vocab, rng=np.random.default_rng(42))
    b = encode(g, induced_vocab, rng=np.random.default_rng(42))
    assert a == b
    assert encode(g, induced_vocab) == encode(g, induced_vocab)


def test_random_orders_differ(benzene, induced_vocab):
    rng = np.random.default_rng(0)
    seen = {tuple(encode(benzene, induced_vocab, rng=rng)) for _ in range(20)}
    assert len(seen) > 1


def test_length_bound(synth_corpus, induced_vocab):
    graphs, _ = synth_corpus
    for g in graphs[:300]:
        ids = encode(g, induced_vocab)
        n, m = len(g.atoms), len(g.bonds)
        assert len(ids) <= 2 * n + 2 * m + connected_components(g) + 2


def test_unknown_atom(methane, induced_vocab, nacl):
    v = induce_vocab([methane])
    with pytest.raises(EncodeError):
        encode(nacl, v)


def test_decode_error_positions(induced_vocab):
    v = induced_vocab
    ch2 = v.id_of("CH2")
    bond = v.bond_id(1)
    # [eor-2] with a single open anchor fails at its own position
    bad = [V.BOS, ch2, V.BOR_ID, bond, ch2, bond, v.eor_id(2), V.EOS]
    with pytest.raises(DecodeError) as err:
        decode(bad, v)
    assert err.value.position == 6

    with pytest.raises(DecodeError):
        decode([V.BOS, ch2], v)  # no EOS
    with pytest.raises(DecodeError):
        decode([ch2, V.EOS], v)  # no BOS
    with pytest.raises(DecodeError):
        decode([V.BOS, ch2, V.EOS, ch2, V.EOS], v)  # tokens after EOS
    with pytest.raises(DecodeError):
        decode([V.BOS, bond, V.EOS], v)  # bond cannot follow BOS


def test_decode_unclosed_anchor(induced_vocab):
    v = induced_vocab
    c = v.id_of("C")
    with pytest.raises(DecodeError):
        decode([V.BOS, c, V.BOR_ID, V.EOS], v)


def test_token_text_roundtrip(cyclohexane, induced_vocab):
    ids = encode(cyclohexane, induced_vocab)
    assert text_to_tokens(tokens_to_text(ids, induced_vocab), induced_vocab) == ids
    with pytest.raises(ValueError):
        text_to_tokens("[bos] NOPE [eos]", induced_vocab)
