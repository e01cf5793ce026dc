"""Dataset containers, split manifests, and the synthetic paired generator.

On disk a dataset is a directory holding ``manifest.csv`` plus one
``<modality>.cpepd`` array file per modality. The array file layout, all
integers little-endian::

    magic     5 bytes  b"CPEPD"
    version   u32      (currently 1)
    n_windows u32
    channels  u32
    timesteps u32
    data      n_windows * channels * timesteps little-endian float32,
              window-major

The manifest CSV has one row per window: window_id, user_id, session_id,
gesture_id, split (tr|val|test), subset (probe-tr-in|tune|probe-tr-unseen|
eval|none), gesture_set (in-dist|unseen|pretrain-only). Its invariants
are re-checked on every load and both file kinds fail closed on any
corruption.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp

ARRAY_MAGIC = b"CPEPD"
ARRAY_VERSION = 1

SPLITS = ("tr", "val", "test")
SUBSETS = ("probe-tr-in", "tune", "probe-tr-unseen", "eval", "none")
GESTURE_SETS = ("in-dist", "unseen", "pretrain-only")

MANIFEST_COLUMNS = ("window_id", "user_id", "session_id", "gesture_id",
                    "split", "subset", "gesture_set")

# Desk-scale gesture vocabulary: 4 in-distribution + 4 unseen hand motions,
# names used only to keep reports readable.
GESTURE_NAMES = {
    0: "finger-pinches",
    1: "thumb-rotation",
    2: "thumb-swipes",
    3: "hand-claw-grasp-flicks",
    4: "shaka-vulcan-peace",
    5: "hook-ok-scissors",
    6: "counting",
    7: "counting-wiggling",
}


class DatasetError(Exception):
    """Malformed container, manifest, or violated split invariant."""


class CorpusImportUnavailable(NotImplementedError):
    """Raised by the external-corpus importer stub."""


def import_emg2pose_stub(path):
    """Documented extension point for ingesting the external sEMG corpus.

    Desk-scale builds cannot ship the multi-hundred-hour recordings, so
    this always raises. To bring external data in, convert it to a CPEPD
    dataset directory (manifest.csv plus per-modality .cpepd array files
    as described in this module) and point the pipeline at that instead.
    """
    raise CorpusImportUnavailable(
        f"importing an external corpus from {str(path)!r} is not implemented "
        "at desk scale; convert the recordings into the CPEPD container "
        "format (manifest.csv + <modality>.cpepd) documented in cpep.data"
    )


# ---------------------------------------------------------------------------
# domain records
# ---------------------------------------------------------------------------

@dataclass
class RawRecording:
    samples: np.ndarray  # (channels, timesteps) float32
    sample_rate: float
    modality: str  # "emg" | "pose"
    user_id: int
    session_id: int
    gesture_id: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise DatasetError(f"samples must be (channels, timesteps), got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DatasetError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.modality not in ("emg", "pose"):
            raise DatasetError(f"unknown modality {self.modality!r}")


@dataclass
class ManifestRow:
    window_id: int
    user_id: int
    session_id: int
    gesture_id: int
    split: str
    subset: str
    gesture_set: str


@dataclass
class DatasetManifest:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    # -- invariants ---------------------------------------------------------
    def validate(self):
        seen = set()
        gesture_sets = {}
        for r in self.rows:
            if r.split not in SPLITS:
                raise DatasetError(f"window {r.window_id}: unknown split {r.split!r}")
            if r.subset not in SUBSETS:
                raise DatasetError(f"window {r.window_id}: unknown subset {r.subset!r}")
            if r.gesture_set not in GESTURE_SETS:
                raise DatasetError(f"window {r.window_id}: unknown gesture_set {r.gesture_set!r}")
            if r.window_id in seen:
                raise DatasetError(f"duplicate window_id {r.window_id}")
            seen.add(r.window_id)
            prev = gesture_sets.setdefault(r.gesture_id, r.gesture_set)
            if prev != r.gesture_set:
                raise DatasetError(
                    f"gesture {r.gesture_id} assigned to both {prev!r} and "
                    f"{r.gesture_set!r}; in-dist and unseen classes must be disjoint"
                )
            if r.gesture_set == "unseen" and r.split == "tr":
                raise DatasetError(
                    f"window {r.window_id}: unseen-gesture window inside the tr split"
                )
        tune_users = self.users(subset="tune")
        eval_users = self.users(subset="eval")
        if tune_users & eval_users:
            raise DatasetError(
                f"tune and eval users overlap: {sorted(tune_users & eval_users)}"
            )
        tr_users = self.users(split="tr")
        if tr_users & eval_users:
            raise DatasetError(
                f"eval users seen during pre-training: {sorted(tr_users & eval_users)}"
            )
        return self

    # -- queries --------------------------------------------------------------
    def select(self, split=None, subset=None, gesture_set=None):
        """Indices (into row order) of rows matching every given filter."""
        out = []
        for i, r in enumerate(self.rows):
            if split is not None and r.split != split:
                continue
            if subset is not None and r.subset != subset:
                continue
            if gesture_set is not None and r.gesture_set != gesture_set:
                continue
            out.append(i)
        return np.asarray(out, dtype=np.int64)

    def users(self, split=None, subset=None):
        idx = self.select(split=split, subset=subset)
        return {self.rows[i].user_id for i in idx}

    def labels(self, indices=None):
        rows = self.rows if indices is None else [self.rows[i] for i in indices]
        return np.asarray([r.gesture_id for r in rows], dtype=np.int64)

    def window_ids(self, indices=None):
        rows = self.rows if indices is None else [self.rows[i] for i in indices]
        return np.asarray([r.window_id for r in rows], dtype=np.int64)

    def summary(self):
        """Split/subset table of gesture and user counts."""
        out = []
        for split in SPLITS:
            for subset in SUBSETS:
                idx = self.select(split=split, subset=subset)
                if not len(idx):
                    continue
                rows = [self.rows[i] for i in idx]
                for gset in GESTURE_SETS:
                    sel = [r for r in rows if r.gesture_set == gset]
                    if not sel:
                        continue
                    out.append({
                        "split": split, "subset": subset, "gesture_set": gset,
                        "windows": len(sel),
                        "gestures": len({r.gesture_id for r in sel}),
                        "users": len({r.user_id for r in sel}),
                    })
        return out

    # -- CSV io -----------------------------------------------------------------
    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(MANIFEST_COLUMNS)
            for r in self.rows:
                writer.writerow([r.window_id, r.user_id, r.session_id,
                                 r.gesture_id, r.split, r.subset, r.gesture_set])

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(header) != MANIFEST_COLUMNS:
                raise DatasetError(f"manifest header {header} != {list(MANIFEST_COLUMNS)}")
            for line in reader:
                if len(line) != len(MANIFEST_COLUMNS):
                    raise DatasetError(f"manifest row has {len(line)} fields: {line}")
                rows.append(ManifestRow(int(line[0]), int(line[1]), int(line[2]),
                                        int(line[3]), line[4], line[5], line[6]))
        return cls(rows).validate()


# ---------------------------------------------------------------------------
# CPEPD array files
# ---------------------------------------------------------------------------

def write_array_file(path, windows):
    windows = np.asarray(windows, dtype=np.float32)
    if windows.ndim != 3:
        raise DatasetError(f"expected (n_windows, channels, timesteps), got {windows.shape}")
    n, c, t = windows.shape
    with open(path, "wb") as f:
        f.write(ARRAY_MAGIC)
        f.write(struct.pack("<IIII", ARRAY_VERSION, n, c, t))
        f.write(np.ascontiguousarray(windows, dtype="<f4").tobytes())


def read_array_file(path):
    with open(path, "rb") as f:
        magic = f.read(len(ARRAY_MAGIC))
        if magic != ARRAY_MAGIC:
            raise DatasetError(f"bad magic {magic!r} in {path}, expected {ARRAY_MAGIC!r}")
        head = f.read(16)
        if len(head) != 16:
            raise DatasetError(f"truncated header in {path}")
        version, n, c, t = struct.unpack("<IIII", head)
        if version != ARRAY_VERSION:
            raise DatasetError(f"unsupported array-file version {version} in {path}")
        payload = f.read(n * c * t * 4 + 1)
        if len(payload) != n * c * t * 4:
            raise DatasetError(
                f"array payload in {path} has {len(payload)} bytes, expected {n * c * t * 4}"
            )
    return np.frombuffer(payload, dtype="<f4").reshape(n, c, t).copy()


@dataclass
class Dataset:
    """In-memory dataset: aligned modality arrays plus the manifest."""

    manifest: DatasetManifest
    arrays: dict  # modality -> (n, C, T) float32, row i <-> manifest.rows[i]

    def __post_init__(self):
        n = len(self.manifest)
        for mod, arr in self.arrays.items():
            if arr.shape[0] != n:
                raise DatasetError(
                    f"{mod} array holds {arr.shape[0]} windows, manifest lists {n}"
                )

    @property
    def emg(self):
        return self.arrays.get("emg")

    @property
    def pose(self):
        return self.arrays.get("pose")

    def subset(self, indices):
        rows = [self.manifest.rows[i] for i in indices]
        return Dataset(DatasetManifest(rows),
                       {m: a[indices] for m, a in self.arrays.items()})


def write_dataset(dataset, path):
    """Write manifest.csv + one .cpepd per modality into directory `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dataset.manifest.validate()
    dataset.manifest.to_csv(path / "manifest.csv")
    for modality in sorted(dataset.arrays):
        write_array_file(path / f"{modality}.cpepd", dataset.arrays[modality])


def load_dataset(path):
    """Read a dataset directory back; fails closed on any inconsistency."""
    path = Path(path)
    manifest_path = path / "manifest.csv"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.csv under {path}")
    manifest = DatasetManifest.from_csv(manifest_path)
    arrays = {}
    for file in sorted(path.glob("*.cpepd")):
        arrays[file.stem] = read_array_file(file)
    if not arrays:
        raise DatasetError(f"no .cpepd array files under {path}")
    return Dataset(manifest, arrays)


# ---------------------------------------------------------------------------
# split assignment
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """How to carve users and gesture classes into evaluation roles.

    Gestures: the `in_dist_gestures` lowest ids become in-distribution, the
    next `unseen_gestures` become unseen, anything beyond is pretrain-only.
    Users are drawn into disjoint tune / probe-unseen / eval pools at
    random (seeded); the remainder pre-trains.
    """

    in_dist_gestures: int = 4
    unseen_gestures: int = 4
    tune_users: int = 2
    probe_unseen_users: int = 3
    eval_users: int = 5
    seed: int = 0


def make_splits(manifest, spec):
    """Assign split/subset/gesture_set tags row by row per the spec.

    Raises DatasetError naming the violated constraint when the spec cannot
    be satisfied. Returns a new validated manifest; the input is untouched.
    """
    gesture_ids = sorted({r.gesture_id for r in manifest.rows})
    users = sorted({r.user_id for r in manifest.rows})
    n_named = spec.in_dist_gestures + spec.unseen_gestures
    if spec.in_dist_gestures < 1 or spec.unseen_gestures < 0:
        raise DatasetError("need at least one in-dist gesture class")
    if len(gesture_ids) < n_named:
        raise DatasetError(
            f"manifest has {len(gesture_ids)} gesture classes, split spec "
            f"needs {n_named}"
        )
    n_reserved = spec.tune_users + spec.probe_unseen_users + spec.eval_users
    if len(users) <= n_reserved:
        raise DatasetError(
            f"manifest has {len(users)} users, split spec reserves {n_reserved} "
            "and needs at least one pre-training user beyond them"
        )

    in_dist = set(gesture_ids[: spec.in_dist_gestures])
    unseen = set(gesture_ids[spec.in_dist_gestures: n_named])

    rng = np.random.default_rng(spec.seed)
    shuffled = list(rng.permutation(users))
    eval_users = set(shuffled[: spec.eval_users])
    tune_users = set(shuffled[spec.eval_users: spec.eval_users + spec.tune_users])
    probe_users = set(shuffled[spec.eval_users + spec.tune_users: n_reserved])

    def gesture_set_of(g):
        if g in in_dist:
            return "in-dist"
        if g in unseen:
            return "unseen"
        return "pretrain-only"

    out = []
    for r in manifest.rows:
        gset = gesture_set_of(r.gesture_id)
        if r.user_id in eval_users:
            split = "test"
            subset = "eval" if gset != "pretrain-only" else "none"
        elif r.user_id in tune_users:
            split = "val"
            subset = "tune" if gset != "pretrain-only" else "none"
        elif r.user_id in probe_users:
            split = "val"
            subset = "probe-tr-unseen" if gset == "unseen" else "none"
        else:  # pre-training user
            if gset == "unseen":
                split, subset = "val", "none"
            else:
                split = "tr"
                subset = "probe-tr-in" if gset == "in-dist" else "none"
        out.append(ManifestRow(r.window_id, r.user_id, r.session_id,
                               r.gesture_id, split, subset, gset))
    return DatasetManifest(out).validate()


# ---------------------------------------------------------------------------
# synthetic paired generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Desk-scale stand-in for a paired EMG/pose corpus.

    Each gesture class is a family of per-joint sinusoid parameters; pose
    windows are those trajectories plus per-user offsets and noise, and EMG
    channels mix the joint angular velocities through a fixed random
    nonlinearity, with additive noise and 60 Hz line interference so the
    notch filter has something to remove. Channel/joint counts default to
    a 16-electrode band and a 20-joint hand model.
    """

    n_users: int = 20
    n_gestures: int = 8
    windows_per_user_per_gesture: int = 4
    sessions_per_user_gesture: int = 1
    emg_channels: int = 16
    joints: int = 20
    sample_rate: float = 2000.0
    window_s: float = 2.0
    pose_noise: float = 0.05
    emg_noise: float = 0.7
    interference_amp: float = 1.0
    user_offset_scale: float = 0.4
    class_posture_scale: float = 0.6
    tonic_scale: float = 0.8  # posture-holding EMG activity (see synth_generate)
    mixing_seed: int = 1234  # EMG<-pose mixing stays fixed across data seeds

    def __post_init__(self):
        if self.n_users < 1 or self.n_gestures < 1:
            raise DatasetError("need at least one user and one gesture")
        if self.windows_per_user_per_gesture < 1:
            raise DatasetError("need at least one window per user per gesture")


def _class_trajectories(config, rng):
    """Per-gesture latent trajectory family.

    A gesture is a static hand posture plus an oscillation: each class owns
    a distinct per-joint posture offset and a distinct base oscillation
    rate (spread over 2.5-8 Hz, small per-joint detuning, plus a second
    harmonic), so classes are identifiable from static pose, from pose
    dynamics, and from the velocity-driven EMG alike.

    Base rates are interleaved across class ids (even linspace positions
    first) so the lower ids (the in-distribution set) span the whole band
    and the higher ids (unseen set) fall between them: unseen-class
    dynamics are interpolations of trained frequencies, never an untrained
    band. Amplitudes scale with 1/rate so velocity magnitude (hence EMG
    power) does not encode the class.
    """
    g, j, h = config.n_gestures, config.joints, 2
    lattice = np.linspace(2.5, 8.0, g)
    order = np.concatenate([np.arange(0, g, 2), np.arange(1, g, 2)])
    base = lattice[order][:, None, None]
    detune = 1.0 + 0.06 * rng.normal(size=(g, j, h))
    freq = base * detune * np.array([1.0, 1.7])
    amp = rng.uniform(0.2, 1.0, size=(g, j, h)) * np.array([1.0, 0.5])
    amp = amp * (5.0 / base)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(g, j, h))
    posture = rng.normal(0.0, config.class_posture_scale, size=(g, j))
    return amp, freq, phase, posture


def _mixing(config):
    rng = np.random.default_rng(config.mixing_seed)
    scale = 1.0 / np.sqrt(config.joints)
    w_lin = rng.normal(0.0, scale, size=(config.emg_channels, config.joints))
    w_nl = rng.normal(0.0, scale, size=(config.emg_channels, config.joints))
    w_tonic = rng.normal(0.0, scale, size=(config.emg_channels, config.joints))
    return w_lin, w_nl, w_tonic


def synth_generate(config, seed):
    """Deterministic paired recordings: one (EMG, pose) pair per
    (user, gesture, session). Returns (emg_recs, pose_recs)."""
    rng = np.random.default_rng([seed, 11])
    amp, freq, phase, posture = _class_trajectories(
        config, np.random.default_rng([seed, 23]))
    w_lin, w_nl, w_tonic = _mixing(config)

    user_offset = rng.normal(0.0, config.user_offset_scale,
                             size=(config.n_users, config.joints))
    user_freq_scale = rng.uniform(0.98, 1.02, size=config.n_users)
    user_gain = rng.normal(1.0, 0.05, size=(config.n_users, config.emg_channels))

    window_len = int(round(config.window_s * config.sample_rate))
    rec_len = window_len * config.windows_per_user_per_gesture
    t = np.arange(rec_len) / config.sample_rate  # continuous time per recording

    emg_recs, pose_recs = [], []
    for user in range(config.n_users):
        for gesture in range(config.n_gestures):
            for session in range(config.sessions_per_user_gesture):
                jitter = rng.uniform(0.0, 2.0 * np.pi,
                                     size=(config.joints, 2))
                w = 2.0 * np.pi * freq[gesture] * user_freq_scale[user]
                arg = w[:, :, None] * t[None, None, :] + \
                    (phase[gesture] + jitter)[:, :, None]
                a = amp[gesture][:, :, None]
                pose = (a * np.sin(arg)).sum(axis=1) + \
                    (posture[gesture] + user_offset[user])[:, None]
                pose = pose + config.pose_noise * rng.normal(size=pose.shape)
                # analytic angular velocity, rescaled to O(1)
                vel = (a * w[:, :, None] * np.cos(arg)).sum(axis=1) / (2.0 * np.pi * 5.0)
                clean = w_lin @ vel + np.tanh(2.0 * (w_nl @ vel))
                # tonic (posture-holding) activity: broadband noise whose
                # per-channel amplitude pattern tracks the held posture; a
                # DC term would not survive the band-pass + instance norm,
                # an amplitude pattern does (as channel waveform texture)
                held = posture[gesture] + user_offset[user]
                tonic_amp = config.tonic_scale * np.abs(np.tanh(w_tonic @ held))
                tonic = tonic_amp[:, None] * rng.normal(size=clean.shape)
                emg = user_gain[user][:, None] * (clean + tonic)
                emg = emg + config.emg_noise * rng.normal(size=emg.shape)
                line_amp = config.interference_amp * rng.uniform(0.5, 1.0,
                                                                 size=(config.emg_channels, 1))
                line_phase = rng.uniform(0.0, 2.0 * np.pi, size=(config.emg_channels, 1))
                emg = emg + line_amp * np.sin(2.0 * np.pi * 60.0 * t[None, :] + line_phase)
                pose_recs.append(RawRecording(pose, config.sample_rate, "pose",
                                              user, session, gesture))
                emg_recs.append(RawRecording(emg, config.sample_rate, "emg",
                                             user, session, gesture))
    return emg_recs, pose_recs


def recordings_to_dataset(emg_recs, pose_recs):
    """Pack paired full recordings into a Dataset (one row per recording)."""
    if len(emg_recs) != len(pose_recs):
        raise DatasetError("EMG and pose recording lists differ in length")
    rows, emg, pose = [], [], []
    min_len_e = min(r.samples.shape[1] for r in emg_recs)
    min_len_p = min(r.samples.shape[1] for r in pose_recs)
    if min_len_e != min_len_p:
        raise DatasetError("paired recordings must share the time axis")
    for i, (e, p) in enumerate(zip(emg_recs, pose_recs)):
        if (e.user_id, e.session_id, e.gesture_id) != (p.user_id, p.session_id, p.gesture_id):
            raise DatasetError(f"recording {i}: EMG/pose metadata mismatch")
        rows.append(ManifestRow(i, e.user_id, e.session_id, e.gesture_id,
                                "tr", "none", "pretrain-only"))
        emg.append(e.samples[:, :min_len_e])
        pose.append(p.samples[:, :min_len_p])
    manifest = DatasetManifest(rows)
    return Dataset(manifest, {"emg": np.stack(emg), "pose": np.stack(pose)})


def preprocess_dataset(dataset, sample_rate, window_s=2.0, filter_emg=True,
                       normalize_emg=True):
    """Recordings -> fixed windows: band-pass+notch EMG, cut both modalities
    into aligned windows, then instance-normalize EMG. Pose passes through
    untouched apart from windowing. Split tags are inherited per window."""
    if dataset.emg is None or dataset.pose is None:
        raise DatasetError("preprocessing needs both emg and pose arrays")
    rows, emg_out, pose_out = [], [], []
    next_id = 0
    for i, row in enumerate(dataset.manifest.rows):
        emg_rec = dataset.emg[i]
        if filter_emg:
            emg_rec = dsp.bandpass_notch(emg_rec, sample_rate)
        emg_wins = dsp.make_windows(emg_rec, sample_rate, window_s)
        pose_wins = dsp.make_windows(dataset.pose[i], sample_rate, window_s)
        for e_w, p_w in zip(emg_wins, pose_wins):
            if normalize_emg:
                e_w = dsp.instance_normalize(e_w)
            rows.append(ManifestRow(next_id, row.user_id, row.session_id,
                                    row.gesture_id, row.split, row.subset,
                                    row.gesture_set))
            emg_out.append(e_w)
            pose_out.append(p_w)
            next_id += 1
    if not rows:
        raise DatasetError("no recording was long enough for a single window")
    manifest = DatasetManifest(rows)
    return Dataset(manifest, {"emg": np.stack(emg_out).astype(np.float32),
                              "pose": np.stack(pose_out).astype(np.float32)})
