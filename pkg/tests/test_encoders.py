import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itemized_clip import autograd as ag
from itemized_clip.encoders import (PAD_ID, START_ID, UNK_ID, TextEncoder, VisualEncoder, Vocabulary,
                                    patchify, tokenize)

from conftest import shape_vocab, tiny_model_config


def test_tokenize_lookup_and_unknown():
    vocab = Vocabulary(["red", "circle"])
    ids, pad = tokenize("Red Circle", vocab, 6)
    assert ids.tolist() == [START_ID, 3, 4, PAD_ID, PAD_ID, PAD_ID]
    assert pad.tolist() == [False, False, False, True, True, True]
    ids, _ = tokenize("xyzzy", vocab, 4)
    assert ids.tolist() == [START_ID, UNK_ID, PAD_ID, PAD_ID]


def test_tokenize_empty_and_truncation():
    vocab = Vocabulary(["a"])
    ids, pad = tokenize("", vocab, 3)
    assert ids.tolist() == [START_ID, PAD_ID, PAD_ID] and pad.tolist() == [False, True, True]
    ids, pad = tokenize("a a a a", vocab, 3)
    assert ids.tolist() == [START_ID, 3, 3] and not pad.any()
    with pytest.raises(ValueError):
        tokenize("a", vocab, 1)


def test_vocab_closed_template_and_roundtrip(tmp_path):
    vocab = shape_vocab()
    assert set(vocab.words) == {"red", "green", "blue", "yellow", "circle", "square", "triangle",
                                "cross", "a", "nothing", "present"}
    vocab.save(tmp_path / "vocab.txt")
    again = Vocabulary.load(tmp_path / "vocab.txt")
    assert again.words == vocab.words
    for w in vocab.words:
        assert again.word_of(again.id_of(w)) == w


def _text_encoder(seed=0):
    cfg = tiny_model_config(max_len=8)
    return TextEncoder(cfg, len(shape_vocab()), np.random.default_rng(seed)), cfg


def test_text_padding_length_irrelevant():
    enc, _ = _text_encoder()
    vocab = shape_vocab()
    short, pshort = tokenize("a red circle", vocab, 5)
    long, plong = tokenize("a red circle", vocab, 8)
    with ag.no_grad():
        a = enc(short[None], pshort[None]).data
        b = enc(long[None], plong[None]).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_text_batch_equals_single_rows():
    """Batched encoding (with dedupe and pad trimming) equals row-by-row encoding."""
    enc, _ = _text_encoder()
    vocab = shape_vocab()
    texts = ["a red circle", "a blue cross", "a red circle", "nothing present", "a"]
    rows = [tokenize(t, vocab, 8) for t in texts]
    tokens = np.stack([r[0] for r in rows])
    pad = np.stack([r[1] for r in rows])
    with ag.no_grad():
        batched = enc(tokens, pad).data
        single = np.concatenate([enc(tokens[i:i + 1], pad[i:i + 1]).data for i in range(len(texts))])
    np.testing.assert_allclose(batched, single, atol=1e-12)
    np.testing.assert_array_equal(batched[0], batched[2])


def test_text_embedding_table_grad():
    enc, _ = _text_encoder()
    tokens, pad = tokenize("a green square", shape_vocab(), 8)
    w = np.random.default_rng(1).normal(size=16)
    fn = lambda: (enc(tokens[None], pad[None]) * w).sum()
    enc.zero_grad()
    fn().backward()
    rows = [(int(t), c) for t in tokens[~pad] for c in range(0, 16, 5)]
    num = ag.numerical_grad(fn, enc.token_embedding, indices=rows)
    ana = np.zeros_like(num)
    for r in rows:
        ana[r] = enc.token_embedding.grad[r]
    assert ag.relative_error(ana, num) < 1e-4


def test_patchify_row_major():
    img = np.arange(4 * 4).reshape(1, 4, 4, 1).astype(float)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 4)
    assert p[0, 1].tolist() == [2, 3, 6, 7]  # patch (0, 1)
    assert p[0, 2].tolist() == [8, 9, 12, 13]  # patch (1, 0)


def test_visual_shapes_and_errors():
    cfg = tiny_model_config()
    enc = VisualEncoder(cfg, np.random.default_rng(0))
    imgs = np.random.default_rng(1).integers(0, 256, size=(2, 16, 16, 3), dtype=np.uint8)
    with ag.no_grad():
        vg, vp = enc(imgs)
    assert vg.shape == (2, cfg.dim) and vp.shape == (2, cfg.num_tokens, cfg.dim)
    with pytest.raises(ValueError):
        enc(imgs[:, :12])
    full = tiny_model_config(image_size=64, patch_size=8)
    assert full.num_tokens == 64


def test_identical_images_identical_outputs():
    cfg = tiny_model_config()
    enc = VisualEncoder(cfg, np.random.default_rng(0))
    img = np.random.default_rng(1).integers(0, 256, size=(1, 16, 16, 3), dtype=np.uint8)
    with ag.no_grad():
        a = enc(np.concatenate([img, img]))
    np.testing.assert_array_equal(a[0].data[0], a[0].data[1])
    np.testing.assert_array_equal(a[1].data[0], a[1].data[1])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 15), st.integers(0, 15), st.integers(0, 1000))
def test_patch_permutation_equivariance_without_positions(a, b, seed):
    cfg = tiny_model_config()
    enc = VisualEncoder(cfg, np.random.default_rng(seed))
    enc.pos_embedding.data[:] = 0.0
    img = np.random.default_rng(seed + 1).integers(0, 256, size=(1, 16, 16, 3), dtype=np.uint8)
    grid = img.reshape(1, 4, 4, 4, 4, 3).transpose(0, 1, 3, 2, 4, 5).reshape(1, 16, 4, 4, 3).copy()
    swapped = grid.copy()
    swapped[:, [a, b]] = grid[:, [b, a]]
    back = swapped.reshape(1, 4, 4, 4, 4, 3).transpose(0, 1, 3, 2, 4, 5).reshape(1, 16, 16, 3)
    with ag.no_grad():
        _, vp1 = enc(img)
        _, vp2 = enc(back)
    perm = np.arange(16)
    perm[[a, b]] = [b, a]
    np.testing.assert_allclose(vp2.data[0], vp1.data[0][perm], atol=1e-10)
