import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpseg.autodiff import Parameter, Rng, Tensor, gradient_check
from cpseg.data.synth import generate_dataset
from cpseg.encoders import (
    RESERVED,
    TextEncoder,
    VisionEncoder,
    build_vocab,
    encode_image,
    encode_text,
)
from cpseg.exceptions import ConfigError, EmptyPromptError, ShapeError
from cpseg.nn import AttentionBlock
from cpseg.prompt_chain import condition_question, presence_question, quantity_question, scene_question
from cpseg.data.taxonomy import KINDS


def small_text(tok, rng_seed=0, layers=1):
    return TextEncoder(tok.size, 8, layers, 2, tok.max_len, Rng(rng_seed))


# -- vocabulary -----------------------------------------------------------------

def test_vocab_counts_words_plus_reserved():
    tok = build_vocab(["is the road flooded"])
    assert len(tok.vocab) == 4
    assert tok.size == 4 + len(RESERVED)


def test_vocab_ignores_duplicates():
    a = build_vocab(["is the road flooded"])
    b = build_vocab(["is the road flooded", "is the road flooded"])
    assert a.vocab == b.vocab


def test_vocab_order_frequency_then_alpha():
    tok = build_vocab(["b a", "b c"])
    assert [w for w, _ in sorted(tok.vocab.items(), key=lambda kv: kv[1])] == ["b", "a", "c"]


def test_vocab_empty_corpus():
    with pytest.raises(ConfigError):
        build_vocab([])


def test_generator_vocab_below_128(taxonomy):
    # oracle: every sentence the question templates can emit, answers included
    corpus = [scene_question() + " yes no"] + [f"{i}" for i in range(64)]
    for kind in KINDS:
        corpus += [presence_question(kind), quantity_question(kind), condition_question(kind)]
    corpus += [taxonomy.description(k) for k in range(taxonomy.K)]
    oracle = build_vocab(corpus, 16)
    samples = generate_dataset(60, 3, taxonomy=taxonomy)
    seen = build_vocab([n.sentence for s in samples for n in s.prompt_records]
                       + [taxonomy.description(k) for k in range(taxonomy.K)])
    assert set(seen.vocab) <= set(oracle.vocab)
    assert oracle.size < 128


def test_tokenizer_round_trip():
    tok = build_vocab(["how many roads are flooded"])
    assert tok.decode(tok.encode("How many roads, are flooded?")) == "how many roads are flooded"


def test_empty_prompt_after_normalisation():
    tok = build_vocab(["a"])
    with pytest.raises(EmptyPromptError):
        tok.encode("?!")


# -- text encoder -----------------------------------------------------------------

def test_encode_text_deterministic():
    tok = build_vocab(["are there roads yes"])
    enc = small_text(tok)
    a = encode_text(tok, enc, "are there roads yes")
    b = encode_text(tok, enc, "are there roads yes")
    np.testing.assert_array_equal(a.data, b.data)


def test_truncation_contract():
    tok = build_vocab(["one two three four five six seven"], max_len=5)
    enc = small_text(tok)
    long = encode_text(tok, enc, "one two three four five six seven")
    short = encode_text(tok, enc, "one two three")
    np.testing.assert_array_equal(long.data, short.data)


def test_padding_does_not_leak_through_causal_mask():
    tok = build_vocab(["a b c"], max_len=8)
    enc = TextEncoder(tok.size, 8, 2, 2, 8, Rng(0), pooling="mean")
    ids = tok.encode("a b")[None]
    base = enc(ids).data
    ids2 = ids.copy()
    ids2[0, -1] = tok.vocab["c"]  # overwrite a padding slot after <eos>
    np.testing.assert_allclose(enc(ids2).data, base, atol=1e-12)


def test_text_embeddings_separate_after_training_step():
    tok = build_vocab(["are there roads yes", "are there trees no"])
    enc = small_text(tok)
    ids = tok.encode_batch(["are there roads yes", "are there trees no"])
    target = np.array([[1.0] * 8, [-1.0] * 8])
    loss = ((enc(ids) - Tensor(target)) ** 2).sum()
    loss.backward()
    for p in enc.parameters():
        if p.grad is not None:
            p.data -= 0.1 * p.grad
    out = enc(ids).data
    assert np.any(out[0] != out[1])
    assert np.linalg.norm(out, axis=1).min() > 0


def test_text_encoder_gradient():
    tok = build_vocab(["is the area flooded yes"], max_len=8)
    enc = TextEncoder(tok.size, 4, 1, 2, 8, Rng(1))
    ids = tok.encode_batch(["is the area flooded yes"])
    w = Rng(2).normal(size=(1, 4))
    assert gradient_check(lambda: (enc(ids) * w).sum(), enc.parameters()) < 1e-4


def test_text_encoder_rejects_wrong_length():
    tok = build_vocab(["a"], max_len=6)
    with pytest.raises(ShapeError):
        small_text(tok)(np.zeros((1, 5), dtype=np.int64))


# -- vision encoder ---------------------------------------------------------------

def test_dense_grid_8x8_p4():
    enc = VisionEncoder((8, 8), 4, 6, 1, 2, Rng(0))
    dense, glob = encode_image(enc, np.zeros((8, 8, 3)))
    assert dense.shape == (2, 2, 6)
    assert glob.shape == (6,)


def test_indivisible_image():
    with pytest.raises(ShapeError):
        VisionEncoder((10, 8), 4, 6, 1, 2, Rng(0))


def test_zero_image_zero_positions_gives_identical_features():
    enc = VisionEncoder((8, 8), 4, 6, 1, 2, Rng(0))
    enc.positional_embedding.data[:] = 0.0
    dense, _ = encode_image(enc, np.zeros((8, 8, 3)))
    flat = dense.data.reshape(-1, 6)
    np.testing.assert_allclose(flat, np.broadcast_to(flat[0], flat.shape), atol=1e-12)


def test_swapping_identical_patches_keeps_features_equal():
    enc = VisionEncoder((8, 8), 4, 6, 1, 2, Rng(0))
    enc.positional_embedding.data[:] = 0.0
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
    img = np.zeros((8, 8, 3))
    img[:4, :4], img[:4, 4:], img[4:, :4], img[4:, 4:] = a, b, a, b
    swapped = img.copy()
    swapped[:4, :4], swapped[4:, :4] = img[4:, :4], img[:4, :4]
    d1, _ = encode_image(enc, img)
    d2, _ = encode_image(enc, swapped)
    np.testing.assert_allclose(d1.data[0, 0], d1.data[1, 0], atol=1e-12)
    np.testing.assert_allclose(d1.data, d2.data, atol=1e-12)


@settings(max_examples=9, deadline=None)
@given(st.sampled_from([4, 8, 16]), st.sampled_from([4, 8, 16]), st.sampled_from([2, 4]))
def test_dense_grid_shape_property(gh, gw, p):
    enc = VisionEncoder((gh * p, gw * p), p, 4, 1, 1, Rng(0))
    dense, glob = enc(np.zeros((1, gh * p, gw * p, 3)))
    assert dense.shape == (1, gh, gw, 4)
    assert glob.shape == (1, 4)


def test_encode_image_deterministic():
    enc = VisionEncoder((8, 8), 4, 6, 1, 2, Rng(0))
    img = np.random.default_rng(1).uniform(size=(8, 8, 3))
    np.testing.assert_array_equal(encode_image(enc, img)[0].data, encode_image(enc, img)[0].data)


def test_vision_encoder_gradient():
    enc = VisionEncoder((4, 4), 2, 4, 1, 2, Rng(3))
    img = np.random.default_rng(3).uniform(size=(1, 4, 4, 3))
    w = Rng(4).normal(size=(1, 2, 2, 4))
    assert gradient_check(lambda: (enc(img)[0] * w).sum(), enc.parameters()) < 1e-4


def test_every_encoder_parameter_gets_gradient():
    tok = build_vocab(["are there roads yes"], max_len=8)
    text = TextEncoder(tok.size, 8, 1, 2, 8, Rng(0))
    vision = VisionEncoder((8, 8), 4, 8, 1, 2, Rng(1))
    dense, glob = vision(np.random.default_rng(0).uniform(size=(2, 8, 8, 3)))
    t = text(tok.encode_batch(["are there roads yes"]))
    loss = (dense.sum(axis=(1, 2)) * t).sum() + (glob * t).sum()
    loss.backward()
    used = set(tok.encode("are there roads yes"))
    for name, p in list(text.named_parameters()) + list(vision.named_parameters()):
        g = p.grad[sorted(used)] if name == "token_embedding" else p.grad
        assert g is not None and np.any(g != 0), name


# -- attention block --------------------------------------------------------------

def test_single_token_attention_is_one():
    block = AttentionBlock(4, 2, Rng(0))
    block(Tensor(np.ones((1, 4))))
    np.testing.assert_array_equal(block.last_attention, np.ones((1, 2, 1, 1)))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_attention_rows_stochastic(n, seed):
    block = AttentionBlock(4, 2, Rng(seed))
    block(Tensor(np.random.default_rng(seed).normal(0, 3, (2, n, 4))))
    np.testing.assert_allclose(block.last_attention.sum(axis=-1), 1.0, atol=1e-9)


def test_attention_block_gradient():
    block = AttentionBlock(4, 2, Rng(5))
    x = Parameter(np.random.default_rng(5).normal(size=(3, 4)))
    w = np.random.default_rng(6).normal(size=(3, 4))
    assert gradient_check(lambda: (block(x) * w).sum(), [x] + block.parameters()) < 1e-4
