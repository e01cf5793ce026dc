"""Containers, manifests, split invariants, and the synthetic generator."""

import numpy as np
import pytest

from cpep import dsp
from cpep.data import (
    CorpusImportUnavailable,
    Dataset,
    DatasetError,
    DatasetManifest,
    ManifestRow,
    SplitSpec,
    SynthConfig,
    import_emg2pose_stub,
    load_dataset,
    make_splits,
    preprocess_dataset,
    read_array_file,
    recordings_to_dataset,
    synth_generate,
    write_array_file,
    write_dataset,
)


def small_synth_config(**kw):
    defaults = dict(n_users=6, n_gestures=4, windows_per_user_per_gesture=2,
                    emg_channels=4, joints=5, sample_rate=2000.0)
    defaults.update(kw)
    return SynthConfig(**defaults)


def make_manifest(n_users=6, n_gestures=4, per=2):
    rows = []
    wid = 0
    for u in range(n_users):
        for g in range(n_gestures):
            for _ in range(per):
                rows.append(ManifestRow(wid, u, 0, g, "tr", "none", "pretrain-only"))
                wid += 1
    return DatasetManifest(rows)


# ---------------------------------------------------------------------------
# array files
# ---------------------------------------------------------------------------

def test_array_file_round_trip_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    wins = rng.normal(size=(10, 16, 4000)).astype(np.float32)
    p1, p2 = tmp_path / "a.cpepd", tmp_path / "b.cpepd"
    write_array_file(p1, wins)
    loaded = read_array_file(p1)
    write_array_file(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(loaded, wins)


def test_array_file_header_contents(tmp_path):
    path = tmp_path / "w.cpepd"
    write_array_file(path, np.zeros((10, 16, 4000), dtype=np.float32))
    raw = path.read_bytes()
    assert raw[:5] == b"CPEPD"
    assert np.frombuffer(raw[5:21], dtype="<u4").tolist() == [1, 10, 16, 4000]


def test_array_file_corrupt_header_fails_closed(tmp_path):
    path = tmp_path / "w.cpepd"
    write_array_file(path, np.zeros((3, 2, 5), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[2] ^= 0x01  # flip a magic byte
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="magic"):
        read_array_file(path)


def test_array_file_truncation_and_padding_fail(tmp_path):
    path = tmp_path / "w.cpepd"
    write_array_file(path, np.ones((2, 2, 3), dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(DatasetError, match="payload"):
        read_array_file(path)
    path.write_bytes(raw + b"\x00")
    with pytest.raises(DatasetError, match="payload"):
        read_array_file(path)


# ---------------------------------------------------------------------------
# manifests and split invariants
# ---------------------------------------------------------------------------

def test_manifest_csv_round_trip(tmp_path):
    manifest = make_splits(make_manifest(), SplitSpec(in_dist_gestures=2,
                                                      unseen_gestures=2,
                                                      tune_users=1,
                                                      probe_unseen_users=1,
                                                      eval_users=2))
    path = tmp_path / "manifest.csv"
    manifest.to_csv(path)
    loaded = DatasetManifest.from_csv(path)
    assert [r.__dict__ for r in loaded.rows] == [r.__dict__ for r in manifest.rows]


def test_manifest_rejects_gesture_in_both_sets():
    rows = [ManifestRow(0, 0, 0, 1, "val", "tune", "in-dist"),
            ManifestRow(1, 0, 0, 1, "val", "tune", "unseen")]
    with pytest.raises(DatasetError, match="disjoint"):
        DatasetManifest(rows).validate()


def test_manifest_rejects_unseen_in_tr():
    rows = [ManifestRow(0, 0, 0, 1, "tr", "none", "unseen")]
    with pytest.raises(DatasetError, match="unseen-gesture window inside the tr"):
        DatasetManifest(rows).validate()


def test_manifest_rejects_tune_eval_user_overlap():
    rows = [ManifestRow(0, 7, 0, 1, "val", "tune", "in-dist"),
            ManifestRow(1, 7, 0, 2, "test", "eval", "unseen")]
    with pytest.raises(DatasetError, match="tune and eval users overlap"):
        DatasetManifest(rows).validate()


def test_manifest_rejects_eval_user_in_pretraining():
    rows = [ManifestRow(0, 3, 0, 1, "tr", "probe-tr-in", "in-dist"),
            ManifestRow(1, 3, 0, 2, "test", "eval", "unseen")]
    with pytest.raises(DatasetError, match="seen during pre-training"):
        DatasetManifest(rows).validate()


def test_make_splits_satisfies_all_invariants():
    manifest = make_manifest(n_users=20, n_gestures=8)
    spec = SplitSpec(in_dist_gestures=4, unseen_gestures=4, tune_users=3,
                     probe_unseen_users=3, eval_users=5, seed=1)
    out = make_splits(manifest, spec).validate()
    assert len(out.users(subset="eval")) == 5
    assert len(out.users(subset="tune")) == 3
    assert out.users(split="tr").isdisjoint(out.users(subset="eval"))
    # probe-tr-in holds exactly the in-dist windows of the tr split
    probe_in = out.select(subset="probe-tr-in")
    assert len(probe_in) > 0
    assert all(out.rows[i].split == "tr" and out.rows[i].gesture_set == "in-dist"
               for i in probe_in)
    # every unseen-gesture window sits outside tr
    for r in out.rows:
        if r.gesture_set == "unseen":
            assert r.split != "tr"


def test_make_splits_infeasible_spec_errors():
    manifest = make_manifest(n_users=4, n_gestures=3)
    with pytest.raises(DatasetError, match="gesture classes"):
        make_splits(manifest, SplitSpec(in_dist_gestures=4, unseen_gestures=4,
                                        tune_users=1, probe_unseen_users=1,
                                        eval_users=1))
    with pytest.raises(DatasetError, match="users"):
        make_splits(manifest, SplitSpec(in_dist_gestures=2, unseen_gestures=1,
                                        tune_users=2, probe_unseen_users=1,
                                        eval_users=2))


def test_make_splits_marks_extra_gestures_pretrain_only():
    manifest = make_manifest(n_users=8, n_gestures=6)
    spec = SplitSpec(in_dist_gestures=2, unseen_gestures=2, tune_users=1,
                     probe_unseen_users=1, eval_users=2)
    out = make_splits(manifest, spec)
    gsets = {r.gesture_id: r.gesture_set for r in out.rows}
    assert gsets[4] == "pretrain-only" and gsets[5] == "pretrain-only"
    # pretrain-only windows never join an evaluation subset
    assert all(r.subset == "none" for r in out.rows if r.gesture_set == "pretrain-only")


# ---------------------------------------------------------------------------
# dataset directory round trip
# ---------------------------------------------------------------------------

def paired_dataset():
    cfg = small_synth_config()
    emg, pose = synth_generate(cfg, seed=3)
    ds = recordings_to_dataset(emg, pose)
    spec = SplitSpec(in_dist_gestures=2, unseen_gestures=2, tune_users=1,
                     probe_unseen_users=1, eval_users=2)
    return Dataset(make_splits(ds.manifest, spec), ds.arrays)


def test_dataset_round_trip(tmp_path):
    ds = paired_dataset()
    write_dataset(ds, tmp_path / "d1")
    loaded = load_dataset(tmp_path / "d1")
    write_dataset(loaded, tmp_path / "d2")
    for name in ("manifest.csv", "emg.cpepd", "pose.cpepd"):
        assert (tmp_path / "d1" / name).read_bytes() == (tmp_path / "d2" / name).read_bytes()


def test_dataset_count_mismatch_fails(tmp_path):
    ds = paired_dataset()
    write_dataset(ds, tmp_path / "d")
    write_array_file(tmp_path / "d" / "emg.cpepd", ds.emg[:-1])
    with pytest.raises(DatasetError, match="manifest lists"):
        load_dataset(tmp_path / "d")


def test_load_rejects_missing_pieces(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_synth_is_deterministic():
    cfg = small_synth_config()
    e1, p1 = synth_generate(cfg, seed=7)
    e2, p2 = synth_generate(cfg, seed=7)
    for a, b in zip(e1 + p1, e2 + p2):
        np.testing.assert_array_equal(a.samples, b.samples)
    e3, _ = synth_generate(cfg, seed=8)
    assert not np.array_equal(e1[0].samples, e3[0].samples)


def test_synth_counts_and_shapes():
    cfg = small_synth_config()
    emg, pose = synth_generate(cfg, seed=0)
    assert len(emg) == len(pose) == cfg.n_users * cfg.n_gestures
    assert emg[0].samples.shape == (4, 8000)
    assert pose[0].samples.shape == (5, 8000)


def test_synth_emg_is_linearly_predictable_from_pose_velocity():
    # learnability oracle: at zero noise, plain least squares from pose
    # velocities to EMG explains most of the variance
    cfg = small_synth_config(emg_noise=0.0, pose_noise=0.0, interference_amp=0.0)
    emg, pose = synth_generate(cfg, seed=1)
    x = np.concatenate([np.gradient(p.samples, axis=1).T for p in pose])
    y = np.concatenate([e.samples.T for e in emg])
    x = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta
    r2 = 1.0 - resid.var() / y.var()
    assert r2 >= 0.5


def test_synth_60hz_interference_removed_by_filter():
    cfg = small_synth_config()
    emg, _ = synth_generate(cfg, seed=2)
    raw = emg[0].samples
    filtered = dsp.bandpass_notch(raw, cfg.sample_rate)

    def power_60(x):
        spec = np.fft.rfft(x[0])
        freqs = np.fft.rfftfreq(x.shape[1], 1.0 / cfg.sample_rate)
        band = (freqs > 59.0) & (freqs < 61.0)
        return np.abs(spec[band]).max()

    drop_db = 20 * np.log10(power_60(raw) / power_60(filtered))
    assert drop_db >= 30.0


def test_preprocess_dataset_windows_and_normalizes():
    ds = paired_dataset()
    out = preprocess_dataset(ds, sample_rate=2000.0)
    assert out.emg.shape == (len(ds.manifest) * 2, 4, 4000)
    assert out.pose.shape[1:] == (5, 4000)
    assert np.abs(out.emg.mean(axis=-1)).max() < 1e-4
    assert np.abs(out.emg.var(axis=-1) - 1).max() < 1e-2
    out.manifest.validate()
    # window rows inherit the recording's metadata
    first = out.manifest.rows[0]
    src = ds.manifest.rows[0]
    assert (first.user_id, first.gesture_id, first.split) == \
        (src.user_id, src.gesture_id, src.split)


def test_import_stub_names_container_format():
    with pytest.raises(CorpusImportUnavailable, match="CPEPD"):
        import_emg2pose_stub("/data/external")
