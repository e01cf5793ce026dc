"""Tokenizer and encoder-decoder contracts."""

import numpy as np
import pytest

from cpep import autodiff as ad
from cpep.autodiff import ShapeError
from cpep.transformer import (
    EncoderConfig,
    EncoderDecoder,
    expected_param_count,
    patchify,
    sinusoidal_table,
    unpatchify,
)


def small_config(**kw):
    defaults = dict(in_channels=3, patch_len=8, embed_dim=32, encoder_layers=2,
                    decoder_layers=1, heads=4, max_tokens=64)
    defaults.update(kw)
    return EncoderConfig(**defaults)


@pytest.fixture
def model():
    return EncoderDecoder(small_config(), rng=np.random.default_rng(0))


def rand_windows(b=2, c=3, t=48, seed=1):
    return np.random.default_rng(seed).normal(size=(b, c, t)).astype(np.float32)


def test_token_counts_at_paper_defaults():
    emg = EncoderConfig(in_channels=16, patch_len=50)
    pose = EncoderConfig(in_channels=20, patch_len=200)
    assert emg.token_count(4000) == 80
    assert pose.token_count(4000) == 20
    assert emg.embed_dim == 256


def test_tokenize_shape_and_zero_input(model):
    toks = model.tokenize(rand_windows())
    assert toks.shape == (2, 6, 32)
    zero = model.tokenize(np.zeros((2, 3, 48), dtype=np.float32))
    np.testing.assert_array_equal(zero.data, 0.0)  # bias initialized to zero


def test_tokenize_rejects_short_window(model):
    with pytest.raises(ShapeError, match="shorter than patch"):
        model.tokenize(np.zeros((1, 3, 5), dtype=np.float32))


def test_tokenize_drops_remainder(model):
    w = rand_windows(t=50)  # 6 patches of 8 plus 2 leftover samples
    assert model.tokenize(w).shape[1] == 6


def test_patchify_layout_is_time_major():
    w = np.arange(2 * 10, dtype=np.float32).reshape(1, 2, 10)
    p = patchify(w, 5)
    # patch[0, s*C + c] == w[c, s]
    assert p[0, 0, 0] == w[0, 0, 0]
    assert p[0, 0, 1] == w[0, 1, 0]
    assert p[0, 0, 2] == w[0, 0, 1]
    np.testing.assert_array_equal(unpatchify(p, 2), w)


def test_encode_output_shapes(model):
    toks = model.tokenize(rand_windows())
    vis = np.stack([[0, 2, 5], [1, 3, 4]])
    out, cls = model.encode(toks, vis)
    assert out.shape == (2, 3, 32)
    assert cls.shape == (2, 32)


def test_encode_rejects_empty_visible_set(model):
    toks = model.tokenize(rand_windows())
    with pytest.raises(ShapeError, match="nonempty"):
        model.encode(toks, np.empty((2, 0), dtype=int))


def test_encode_ignores_masked_token_contents(model):
    w = rand_windows(seed=2)
    toks = model.tokenize(w).data.copy()
    vis = np.stack([[0, 2, 5], [1, 3, 4]])
    out1, cls1 = model.encode(ad.Tensor(toks), vis)
    scrambled = toks.copy()
    scrambled[0, 1], scrambled[0, 3] = toks[0, 3].copy(), toks[0, 1].copy()  # masked-out slots
    out2, cls2 = model.encode(ad.Tensor(scrambled), vis)
    np.testing.assert_array_equal(out1.data, out2.data)
    np.testing.assert_array_equal(cls1.data, cls2.data)


def test_full_sequence_encode_matches_explicit_indices(model):
    toks = model.tokenize(rand_windows(seed=3))
    out1, cls1 = model.encode(toks)
    toks2 = model.tokenize(rand_windows(seed=3))
    out2, cls2 = model.encode(toks2, np.broadcast_to(np.arange(6), (2, 6)))
    np.testing.assert_array_equal(out1.data, out2.data)
    np.testing.assert_array_equal(cls1.data, cls2.data)


def test_decode_output_shape_for_any_mask_ratio(model):
    w = rand_windows(seed=4)
    toks = model.tokenize(w)
    for n_vis in (1, 3, 6):
        vis = np.stack([np.random.default_rng(n_vis).permutation(6)[:n_vis],
                        np.random.default_rng(n_vis + 9).permutation(6)[:n_vis]])
        mask = np.stack([np.setdiff1d(np.arange(6), v) for v in vis])
        out, cls = model.encode(toks, vis)
        recon = model.decode(out, cls, vis, mask)
        assert recon.shape == (2, 6, 24)  # K x (C*S)


def test_decode_empty_mask_is_defined(model):
    toks = model.tokenize(rand_windows(seed=5))
    vis = np.broadcast_to(np.arange(6), (2, 6)).copy()
    out, cls = model.encode(toks, vis)
    recon = model.decode(out, cls, vis, np.empty((2, 0), dtype=int))
    assert recon.shape == (2, 6, 24)


def test_decode_rejects_overlap_or_gap(model):
    toks = model.tokenize(rand_windows(seed=6))
    vis = np.stack([[0, 1, 2], [0, 1, 2]])
    out, cls = model.encode(toks, vis)
    overlap = np.stack([[2, 3, 4], [3, 4, 5]])
    with pytest.raises(ShapeError, match="partition"):
        model.decode(out, cls, vis, overlap)
    gap = np.stack([[4, 5], [4, 5]])  # position 3 missing from the union
    with pytest.raises(ShapeError, match="partition"):
        model.decode(out, cls, vis, gap)


def test_decode_restores_original_order(model):
    # with the head replaced by identity-ish behavior we can't directly read
    # positions, so instead check determinism under different vis orderings
    w = rand_windows(seed=7)
    toks1 = model.tokenize(w)
    vis_a = np.stack([[0, 2, 4], [1, 3, 5]])
    mask_a = np.stack([[1, 3, 5], [0, 2, 4]])
    out_a, cls_a = model.encode(toks1, vis_a)
    recon_a = model.decode(out_a, cls_a, vis_a, mask_a)

    toks2 = model.tokenize(w)
    perm = np.stack([[4, 0, 2], [5, 1, 3]])  # same sets, different order
    mask_p = np.stack([[5, 1, 3], [4, 2, 0]])
    out_p, cls_p = model.encode(toks2, perm)
    recon_p = model.decode(out_p, cls_p, perm, mask_p)
    np.testing.assert_allclose(recon_a.data, recon_p.data, atol=2e-5)


def test_forward_is_deterministic(model):
    w = rand_windows(seed=8)
    vis = np.stack([[0, 2, 5], [1, 3, 4]])
    mask = np.stack([np.setdiff1d(np.arange(6), v) for v in vis])

    def run():
        toks = model.tokenize(w)
        out, cls = model.encode(toks, vis)
        return model.decode(out, cls, vis, mask).data.copy()

    np.testing.assert_array_equal(run(), run())


def test_cls_embedding_shape_and_determinism():
    cfg = EncoderConfig(in_channels=4, patch_len=10)  # default d=256
    model = EncoderDecoder(cfg, rng=np.random.default_rng(1))
    w = np.random.default_rng(2).normal(size=(3, 4, 40)).astype(np.float32)
    with ad.no_grad():
        emb = model.cls_embedding(w)
    assert emb.shape == (3, 256)
    with ad.no_grad():
        same = model.cls_embedding(np.stack([w[0], w[0]]))
    np.testing.assert_array_equal(same.data[0], same.data[1])


def test_avg_pool_of_single_token_equals_token_output(model):
    w = rand_windows(t=8)  # exactly one patch
    toks = model.tokenize(w)
    out, _ = model.encode(toks)
    pooled = model.avg_pool_embedding(w)
    np.testing.assert_allclose(pooled.data, out.data[:, 0, :], atol=1e-7)


def test_param_count_matches_closed_form():
    for cfg in (small_config(),
                EncoderConfig(in_channels=16, patch_len=50),
                EncoderConfig(in_channels=20, patch_len=200, head_out_dim=123)):
        model = EncoderDecoder(cfg, rng=np.random.default_rng(0))
        assert model.param_count() == expected_param_count(cfg)


def test_attention_rows_sum_to_one(model):
    toks = model.tokenize(rand_windows(seed=9))
    attn = []
    model.encode(toks, np.stack([[0, 2, 5], [1, 3, 4]]), attn_out=attn)
    assert len(attn) == 2  # one per encoder layer
    for a in attn:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-5)


def test_zeroed_position_table_gives_permutation_equivariance(model):
    model.pos_table = np.zeros_like(model.pos_table)
    w = rand_windows(seed=10)
    toks = model.tokenize(w).data
    order = np.array([3, 0, 5, 1, 4, 2])
    out1, cls1 = model.encode(ad.Tensor(toks))
    out2, cls2 = model.encode(ad.Tensor(toks[:, order]))
    np.testing.assert_allclose(out2.data, out1.data[:, order], atol=1e-5)
    np.testing.assert_allclose(cls2.data, cls1.data, atol=1e-5)


def test_state_round_trip_preserves_outputs(model):
    w = rand_windows(seed=11)
    with ad.no_grad():
        before = model.cls_embedding(w).data.copy()
    state = model.state_arrays()
    clone = EncoderDecoder(small_config(), rng=np.random.default_rng(99))
    clone.load_state(state)
    with ad.no_grad():
        after = clone.cls_embedding(w).data.copy()
    np.testing.assert_array_equal(before, after)


def test_load_state_rejects_mismatches(model):
    state = model.state_arrays()
    state.pop("cls")
    with pytest.raises(ShapeError, match="missing"):
        model.load_state(state)


def test_freeze_marks_all_parameters(model):
    model.freeze()
    assert model.frozen
    toks = model.tokenize(rand_windows(seed=12))
    out, cls = model.encode(toks)
    assert not cls.requires_grad


def test_sinusoidal_table_values():
    table = sinusoidal_table(4, 6)
    assert table.shape == (4, 6)
    np.testing.assert_allclose(table[0], [0, 1, 0, 1, 0, 1], atol=1e-7)
    np.testing.assert_allclose(table[1, 0], np.sin(1.0), atol=1e-6)
    np.testing.assert_allclose(table[1, 1], np.cos(1.0), atol=1e-6)
