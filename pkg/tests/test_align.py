"""InfoNCE identities, frozen-anchor guarantees, and alignment training."""

import numpy as np
import pytest

from cpep import autodiff as ad
from cpep.autodiff import ShapeError, Tensor
from cpep.align import (
    ABLATION_MODES,
    AlignConfig,
    AlignmentModel,
    build_alignment_model,
    embed_pair,
    in_batch_retrieval_at_1,
    infonce_loss,
    normalize_rows,
    similarity_matrix,
    train_cpep,
)
from cpep.checkpoint import weights_hash
from cpep.mae import build_encoder

from gradcheck_util import numeric_gradient, relative_error


# ---------------------------------------------------------------------------
# normalize_rows
# ---------------------------------------------------------------------------

def test_normalize_rows_three_four_five():
    out = normalize_rows(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(out, [[0.6, 0.8]], rtol=1e-7)


def test_normalize_rows_idempotent_on_unit_rows():
    rng = np.random.default_rng(0)
    x = normalize_rows(rng.normal(size=(10, 8)))
    np.testing.assert_allclose(normalize_rows(x), x, atol=1e-6)


def test_normalize_rows_scale_invariant():
    rng = np.random.default_rng(1)
    for _ in range(20):
        row = rng.normal(size=(1, 16))
        alpha = rng.uniform(0.1, 50.0)
        np.testing.assert_allclose(normalize_rows(alpha * row), normalize_rows(row),
                                   atol=1e-6)


def test_normalize_rows_zero_row_guarded():
    out = normalize_rows(np.zeros((1, 4)))
    np.testing.assert_array_equal(out, np.zeros((1, 4)))


def test_normalize_rows_tensor_matches_numpy():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 5))
    out = normalize_rows(Tensor(x))
    np.testing.assert_allclose(out.data, normalize_rows(x), atol=1e-7)
    assert np.abs(np.linalg.norm(out.data, axis=1) - 1.0).max() < 1e-5


# ---------------------------------------------------------------------------
# InfoNCE identities
# ---------------------------------------------------------------------------

def test_infonce_single_pair_is_zero():
    assert infonce_loss(np.array([[3.7]])).item() == pytest.approx(0.0, abs=1e-7)


def test_infonce_identical_embeddings_equal_log_n():
    for n in (2, 5, 17):
        s = np.ones((n, n))
        assert infonce_loss(s).item() == pytest.approx(np.log(n), abs=1e-6)


def test_infonce_orthogonal_two_pair_case():
    s = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert infonce_loss(s).item() == pytest.approx(np.log(1 + np.exp(-1.0)), abs=1e-6)


def test_infonce_symmetric_under_transpose():
    rng = np.random.default_rng(3)
    for _ in range(10):
        s = rng.normal(size=(7, 7))
        assert infonce_loss(s).item() == infonce_loss(s.T).item()


def test_infonce_nonnegative_when_diagonal_dominates():
    rng = np.random.default_rng(4)
    s = rng.uniform(-1, 0, size=(6, 6))
    np.fill_diagonal(s, 2.0)
    assert infonce_loss(s).item() >= 0.0


def test_infonce_approaches_zero_as_positives_dominate():
    s = np.zeros((4, 4))
    np.fill_diagonal(s, 40.0)
    assert infonce_loss(s).item() == pytest.approx(0.0, abs=1e-6)


def test_infonce_rejects_non_square():
    with pytest.raises(ShapeError, match="square"):
        infonce_loss(np.zeros((3, 4)))


def test_infonce_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    s0 = rng.normal(size=(5, 5))

    def f(s):
        with ad.no_grad():
            return infonce_loss(Tensor(s)).item()

    t = Tensor(s0, requires_grad=True)
    infonce_loss(t).backward()
    numeric = numeric_gradient(f, [s0], wrt=0)
    assert relative_error(t.grad, numeric) < 1e-6


def test_infonce_stable_at_large_scores():
    s = np.full((3, 3), 500.0)
    np.fill_diagonal(s, 600.0)
    assert np.isfinite(infonce_loss(s).item())


# ---------------------------------------------------------------------------
# alignment model and training
# ---------------------------------------------------------------------------

def tiny_encoders(seed=0):
    emg = build_encoder(3, patch_len=6, seed=seed, embed_dim=16, encoder_layers=1,
                        decoder_layers=1, heads=2, max_tokens=16)
    pose = build_encoder(2, patch_len=12, seed=seed + 1, embed_dim=16,
                         encoder_layers=1, decoder_layers=1, heads=2, max_tokens=16)
    return emg, pose


def tiny_align_config(**kw):
    defaults = dict(epochs=6, batch_size=16, lr=3e-3, seed=4, channel_rotate=False,
                    schedule_period_epochs=6)
    defaults.update(kw)
    return AlignConfig(**defaults)


def paired_tiny_data(n=48, seed=6, noise=0.15):
    """Paired windows whose latent phase is recoverable from both sides."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 4 * np.pi, 24)[None, :]
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1))
    pose = np.stack([np.sin(t + phase), np.cos(t + phase)], axis=1)
    emg = np.stack([np.sin(t + phase), np.cos(t + phase) * 0.5,
                    np.sin(2 * (t + phase))], axis=1)
    emg = emg + noise * rng.normal(size=emg.shape)
    return emg.astype(np.float32), pose.astype(np.float32)


def test_embed_pair_shapes_and_frozen_pose():
    emg_enc, pose_enc = tiny_encoders()
    model = AlignmentModel(emg_enc, pose_enc, tiny_align_config())
    emg, pose = paired_tiny_data(n=8)
    u, v = embed_pair(model, emg, pose)
    assert u.shape == (8, 16) and v.shape == (8, 16)
    assert u.requires_grad
    assert not v.requires_grad  # frozen anchor never enters the tape


def test_embed_pair_detects_modality_mixup():
    emg_enc, pose_enc = tiny_encoders()
    model = AlignmentModel(emg_enc, pose_enc, tiny_align_config())
    emg, pose = paired_tiny_data(n=4)
    with pytest.raises(ShapeError, match="mix-up"):
        embed_pair(model, pose, emg)


def test_pose_embedding_constant_across_training_steps():
    emg_enc, pose_enc = tiny_encoders()
    model = AlignmentModel(emg_enc, pose_enc, tiny_align_config(epochs=2))
    emg, pose = paired_tiny_data(n=16)
    with ad.no_grad():
        before = model.pose_embedding(pose[:4]).data.copy()
    train_cpep(emg, pose, model, model.config)
    with ad.no_grad():
        after = model.pose_embedding(pose[:4]).data.copy()
    np.testing.assert_array_equal(before, after)


def test_train_cpep_keeps_pose_weights_bit_identical():
    emg_enc, pose_enc = tiny_encoders(seed=2)
    model = AlignmentModel(emg_enc, pose_enc, tiny_align_config(epochs=3))
    emg, pose = paired_tiny_data(n=32)
    pose_hash = weights_hash(pose_enc.state_arrays())
    emg_hash = weights_hash(emg_enc.state_arrays())
    train_cpep(emg, pose, model, model.config)
    assert weights_hash(pose_enc.state_arrays()) == pose_hash
    assert weights_hash(emg_enc.state_arrays()) != emg_hash  # EMG side moved


def test_pose_gradients_absent_from_gradient_set():
    emg_enc, pose_enc = tiny_encoders(seed=3)
    model = AlignmentModel(emg_enc, pose_enc, tiny_align_config())
    assert not any(k.startswith("pose.") for k in model.trainable_params())
    emg, pose = paired_tiny_data(n=8)
    u, v = embed_pair(model, emg, pose)
    s = similarity_matrix(model, u, v.data)
    infonce_loss(s).backward()
    assert all(p.grad is None for p in pose_enc.params.values())


def test_temperature_clamped_and_logged():
    emg_enc, pose_enc = tiny_encoders(seed=4)
    cfg = tiny_align_config(epochs=3, lr=0.5)  # huge lr to slam the bounds
    model = AlignmentModel(emg_enc, pose_enc, cfg)
    emg, pose = paired_tiny_data(n=32)
    _, history, _ = train_cpep(emg, pose, model, cfg)
    for row in history:
        assert 0.005 <= row["tau"] <= 1.0
    assert 0.005 <= model.temperature <= 1.0


def test_train_cpep_aligns_tiny_data():
    # mirror the real pipeline: MAE-pretrain both towers, then align with
    # the pose side frozen; checks learning progress, not the desk-scale bar
    from cpep.mae import TrainConfig, train_mae

    emg, pose = paired_tiny_data(n=96, seed=7)
    kw = dict(embed_dim=32, encoder_layers=1, decoder_layers=1, heads=2, max_tokens=16)
    emg_enc = build_encoder(3, patch_len=6, seed=5, **kw)
    pose_enc = build_encoder(2, patch_len=12, seed=6, **kw)
    mae_cfg = TrainConfig(epochs=40, batch_size=24, lr=1e-2, seed=0,
                          channel_rotate=False, schedule_period_epochs=40)
    pose_enc, _ = train_mae(pose, "pose", mae_cfg, model=pose_enc)
    emg_enc, _ = train_mae(emg, "emg", mae_cfg, model=emg_enc)

    cfg = tiny_align_config(epochs=60, lr=3e-3, batch_size=24,
                            schedule_period_epochs=60)
    model = AlignmentModel(emg_enc, pose_enc, cfg)
    model, history, report = train_cpep(emg, pose, model, cfg,
                                        convergence_threshold=0.3)
    chance = 1.0 / 24
    assert history[-1]["retrieval_at_1"] >= 7 * chance
    assert history[-1]["loss"] < 0.6 * history[0]["loss"]
    assert report["converged"]


def test_train_cpep_deterministic():
    emg, pose = paired_tiny_data(n=32, seed=8)

    def run():
        emg_enc, pose_enc = tiny_encoders(seed=6)
        cfg = tiny_align_config(epochs=3)
        model = AlignmentModel(emg_enc, pose_enc, cfg)
        _, history, _ = train_cpep(emg, pose, model, cfg)
        return [r["loss"] for r in history]

    assert run() == run()


def test_train_cpep_rejects_empty_or_unpaired():
    emg_enc, pose_enc = tiny_encoders(seed=7)
    model = AlignmentModel(emg_enc, pose_enc, tiny_align_config())
    with pytest.raises(ValueError, match="empty"):
        train_cpep(np.empty((0, 3, 24), np.float32), np.empty((0, 2, 24), np.float32),
                   model, model.config)
    emg, pose = paired_tiny_data(n=8)
    with pytest.raises(ValueError, match="unpaired"):
        train_cpep(emg, pose[:4], model, model.config)


def test_duplicate_pose_windows_warn(caplog):
    import logging
    emg_enc, pose_enc = tiny_encoders(seed=8)
    cfg = tiny_align_config(epochs=1)
    model = AlignmentModel(emg_enc, pose_enc, cfg)
    emg, pose = paired_tiny_data(n=8)
    emg = np.concatenate([emg, emg[:4]])
    pose = np.concatenate([pose, pose[:4]])  # exact duplicates
    with caplog.at_level(logging.WARNING, logger="cpep.align"):
        train_cpep(emg, pose, model, cfg)
    assert any("duplicate" in r.message for r in caplog.records)


def test_frozen_emg_mode_trains_head_only():
    emg_enc, pose_enc = tiny_encoders(seed=9)
    cfg = tiny_align_config(epochs=2, **ABLATION_MODES["cpep-frozen"])
    model = AlignmentModel(emg_enc, pose_enc, cfg)
    emg_hash = weights_hash(emg_enc.state_arrays())
    head_before = model.head_params["proj.w1"].data.copy()
    emg, pose = paired_tiny_data(n=16)
    train_cpep(emg, pose, model, cfg)
    assert weights_hash(emg_enc.state_arrays()) == emg_hash
    assert not np.array_equal(model.head_params["proj.w1"].data, head_before)


def test_build_alignment_model_modes():
    emg_enc, pose_enc = tiny_encoders(seed=10)
    cfg = tiny_align_config(**ABLATION_MODES["cpep-randinit"])
    model = build_alignment_model(cfg, emg_mae=emg_enc, pose_mae=pose_enc)
    assert model.emg_encoder is not emg_enc  # fresh random tower
    assert model.pose_encoder is pose_enc

    cfg = tiny_align_config(**ABLATION_MODES["cpep-trainpose"])
    model = build_alignment_model(cfg, emg_mae=emg_enc, pose_mae=pose_enc)
    assert any(k.startswith("pose.") for k in model.trainable_params())


def test_mlp_head_variant():
    emg_enc, pose_enc = tiny_encoders(seed=11)
    cfg = tiny_align_config(head="mlp")
    model = AlignmentModel(emg_enc, pose_enc, cfg)
    emg, pose = paired_tiny_data(n=4)
    u, _ = embed_pair(model, emg, pose)
    assert u.shape == (4, 16)
    assert "proj.w2" in model.head_params


def test_avgpool_embedding_mode():
    emg_enc, pose_enc = tiny_encoders(seed=12)
    cfg = tiny_align_config(**ABLATION_MODES["cpep-avgpool"])
    model = AlignmentModel(emg_enc, pose_enc, cfg)
    emg, pose = paired_tiny_data(n=4)
    u, v = embed_pair(model, emg, pose)
    assert u.shape == (4, 16) and v.shape == (4, 16)


def test_state_round_trip():
    emg_enc, pose_enc = tiny_encoders(seed=13)
    cfg = tiny_align_config()
    model = AlignmentModel(emg_enc, pose_enc, cfg)
    emg, pose = paired_tiny_data(n=4)
    with ad.no_grad():
        before = model.emg_embedding(emg).data.copy()
    state = model.state_arrays()

    emg2, pose2 = tiny_encoders(seed=99)
    clone = AlignmentModel(emg2, pose2, cfg)
    clone.load_state(state)
    with ad.no_grad():
        after = clone.emg_embedding(emg).data.copy()
    np.testing.assert_array_equal(before, after)
    assert clone.temperature == model.temperature


def test_retrieval_at_1_helper():
    s = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert in_batch_retrieval_at_1(s) == 1.0
    s = np.array([[0.1, 0.9], [0.2, 0.8]])
    assert in_batch_retrieval_at_1(s) == 0.5
