"""End-to-end experiment orchestration over a synthetic paired corpus.

Stages mirror the training recipe: generate paired recordings, filter and
window them, pre-train one masked autoencoder per modality, contrastively
align the EMG tower to the frozen pose tower, and score every method with
linear probes and (for the aligned models) zero-shot retrieval.

Desk-scale defaults keep the full run in the tens of minutes on a laptop
CPU; the architecture dims (patch lengths, width, depth, mask ratio, k)
stay at their reference values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .align import (
    ABLATION_MODES,
    AlignConfig,
    build_alignment_model,
    train_cpep,
)
from .data import (
    Dataset,
    SplitSpec,
    SynthConfig,
    make_splits,
    preprocess_dataset,
    recordings_to_dataset,
    synth_generate,
)
from .evaluate import (
    ProbeConfig,
    build_pose_index,
    encode_windows,
    macro_accuracy,
    per_class_recall,
    train_linear_probe,
    zero_shot_predict,
)
from .mae import TrainConfig, build_encoder, build_poset_encoder, train_mae, train_poset

logger = logging.getLogger(__name__)

EMG_METHODS = ("cpep", "cpep-randinit", "cpep-frozen", "cpep-avgpool",
               "emg-mae", "poset")
DEFAULT_METHODS = ("cpep", "cpep-randinit", "cpep-frozen", "emg-mae",
                   "poset", "pose-mae")


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSpec = field(default_factory=lambda: SplitSpec(
        in_dist_gestures=4, unseen_gestures=4, tune_users=2,
        probe_unseen_users=3, eval_users=5))
    emg_patch_len: int = 50
    pose_patch_len: int = 200
    embed_dim: int = 256
    encoder_layers: int = 4
    decoder_layers: int = 2
    heads: int = 4
    mask_ratio: float = 0.5
    mae_epochs: int = 20
    align_epochs: int = 20
    poset_epochs: int = 12
    batch_size: int = 128
    lr: float = 5e-4  # desk-scale runs see few steps, so larger than 1e-4
    weight_decay: float = 1e-5
    schedule_period_epochs: int = 10
    schedule_period_mult: int = 2
    lr_min: float = 1e-6
    temperature_init: float = 0.02
    projection_head: str = "affine"
    channel_rotate: bool = True
    probe_lr: float = 1e-2
    probe_epochs: int = 100
    k: int = 10
    seed: int = 0

    def arch_kwargs(self):
        return dict(embed_dim=self.embed_dim, encoder_layers=self.encoder_layers,
                    decoder_layers=self.decoder_layers, heads=self.heads)

    def mae_config(self, epochs=None):
        return TrainConfig(
            epochs=epochs or self.mae_epochs, batch_size=self.batch_size,
            lr=self.lr, weight_decay=self.weight_decay,
            schedule_period_epochs=self.schedule_period_epochs,
            schedule_period_mult=self.schedule_period_mult, lr_min=self.lr_min,
            seed=self.seed, mask_ratio=self.mask_ratio,
            channel_rotate=self.channel_rotate)

    def align_config(self, mode="cpep"):
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown alignment mode {mode!r}; "
                             f"choose from {sorted(ABLATION_MODES)}")
        return AlignConfig(
            epochs=self.align_epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay,
            schedule_period_epochs=self.schedule_period_epochs,
            schedule_period_mult=self.schedule_period_mult, lr_min=self.lr_min,
            seed=self.seed, channel_rotate=self.channel_rotate,
            temperature_init=self.temperature_init, head=self.projection_head,
            **ABLATION_MODES[mode])

    def probe_config(self):
        return ProbeConfig(lr=self.probe_lr, epochs=self.probe_epochs,
                           batch_size=self.batch_size, seed=self.seed)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_synth(config):
    """Paired recordings with split tags already assigned."""
    emg_recs, pose_recs = synth_generate(config.synth, config.seed)
    ds = recordings_to_dataset(emg_recs, pose_recs)
    manifest = make_splits(ds.manifest, config.split)
    return Dataset(manifest, ds.arrays)


def run_preprocess(raw, config):
    return preprocess_dataset(raw, config.synth.sample_rate, config.synth.window_s)


def _paired_training_windows(ds):
    idx = ds.manifest.select(split="tr")
    if not len(idx):
        raise ValueError("dataset has no tr-split windows")
    return ds.emg[idx], ds.pose[idx]


def run_pretrain(ds, modality, config, epochs=None, patch_len=None, mask_ratio=None):
    """MAE pre-training over the tr split of one modality."""
    emg_tr, pose_tr = _paired_training_windows(ds)
    windows = emg_tr if modality == "emg" else pose_tr
    default_patch = config.emg_patch_len if modality == "emg" else config.pose_patch_len
    model = build_encoder(windows.shape[1], patch_len or default_patch,
                          seed=config.seed, **config.arch_kwargs())
    train_cfg = config.mae_config(epochs=epochs)
    if mask_ratio is not None:
        train_cfg = replace(train_cfg, mask_ratio=mask_ratio)
    val_idx = ds.manifest.select(split="val")
    val = (ds.emg if modality == "emg" else ds.pose)[val_idx] if len(val_idx) else None
    return train_mae(windows, modality, train_cfg, model=model, val_windows=val)


def run_align(ds, emg_mae, pose_mae, config, mode="cpep"):
    """Contrastive alignment stage; returns (model, history, report)."""
    align_cfg = config.align_config(mode)
    model = build_alignment_model(
        align_cfg, emg_mae=emg_mae, pose_mae=pose_mae,
        emg_channels=ds.emg.shape[1], pose_joints=ds.pose.shape[1],
        emg_patch_len=config.emg_patch_len, pose_patch_len=config.pose_patch_len,
        arch_kwargs=config.arch_kwargs())
    emg_tr, pose_tr = _paired_training_windows(ds)
    return train_cpep(emg_tr, pose_tr, model, align_cfg)


def run_poset(ds, config):
    emg_tr, pose_tr = _paired_training_windows(ds)
    model = build_poset_encoder(emg_tr.shape[1], pose_tr.shape[1],
                                config.emg_patch_len, seed=config.seed,
                                **config.arch_kwargs())
    return train_poset(emg_tr, pose_tr, config.mae_config(epochs=config.poset_epochs),
                       model=model)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def aligned_embed_fn(model):
    """Post-projection EMG embeddings of an alignment model."""

    def embed(windows, batch_size=128):
        from . import autodiff as ad
        windows = np.asarray(windows, dtype=np.float32)
        out = np.empty((windows.shape[0], model.emg_encoder.config.embed_dim),
                       dtype=np.float32)
        with ad.no_grad():
            for start in range(0, windows.shape[0], batch_size):
                u = model.emg_embedding(windows[start:start + batch_size])
                out[start:start + batch_size] = u.data
        return out

    return embed


def encoder_embed_fn(encoder, embedding="cls"):
    def embed(windows, batch_size=128):
        return encode_windows(encoder, windows, embedding, batch_size)

    return embed


def _probe_row(method, gesture_set, ds, embed_fn, modality, train_subset, config):
    manifest = ds.manifest
    windows = ds.emg if modality == "emg" else ds.pose
    train_idx = manifest.select(subset=train_subset)
    tune_idx = manifest.select(subset="tune", gesture_set=gesture_set)
    eval_idx = manifest.select(subset="eval", gesture_set=gesture_set)
    if not (len(train_idx) and len(eval_idx)):
        raise ValueError(f"empty probe split for {method}/{gesture_set}")
    head = train_linear_probe(
        embed_fn(windows[train_idx]), manifest.labels(train_idx),
        config.probe_config(),
        tune_embeddings=embed_fn(windows[tune_idx]) if len(tune_idx) else None,
        tune_labels=manifest.labels(tune_idx) if len(tune_idx) else None)
    preds = head.predict(embed_fn(windows[eval_idx]))
    labels = manifest.labels(eval_idx)
    return _result_row(method, "LP", gesture_set, preds, labels, config.seed)


def _result_row(method, protocol, gesture_set, preds, labels, seed):
    recalls = per_class_recall(preds, labels)
    return {
        "protocol": protocol,
        "gesture_set": gesture_set,
        "method": method,
        "macro_accuracy": macro_accuracy(preds, labels),
        "per_class_recall": ";".join(f"{c}={recalls[c]!r}" for c in sorted(recalls)),
        "seed": seed,
    }


def evaluate_linear_probes(method, embed_fn, ds, config, modality="emg"):
    """LP rows for both gesture sets: in-dist trains on probe-tr-in, unseen
    on probe-tr-unseen, both early-stopped on the tune users and scored on
    the eval users."""
    return [
        _probe_row(method, "in-dist", ds, embed_fn, modality, "probe-tr-in", config),
        _probe_row(method, "unseen", ds, embed_fn, modality, "probe-tr-unseen", config),
    ]


def evaluate_zero_shot(method, embed_fn, ds, pose_encoder, config, embedding="cls"):
    """ZS rows for both gesture sets; the retrieval pool is every eval-set
    pose window (both gesture sets present), mirroring retrieval over the
    full test pose corpus."""
    manifest = ds.manifest
    eval_idx = manifest.select(subset="eval")
    index = build_pose_index(ds.pose[eval_idx], manifest.labels(eval_idx),
                             manifest.window_ids(eval_idx), pose_encoder,
                             embedding=embedding)
    rows = []
    for gesture_set in ("in-dist", "unseen"):
        q_idx = manifest.select(subset="eval", gesture_set=gesture_set)
        queries = embed_fn(ds.emg[q_idx])
        preds = zero_shot_predict(queries, index, k=config.k)
        rows.append(_result_row(method, "ZS", gesture_set, preds,
                                manifest.labels(q_idx), config.seed))
    return rows


# ---------------------------------------------------------------------------
# whole experiment
# ---------------------------------------------------------------------------

def run_experiment(ds, config, methods=DEFAULT_METHODS):
    """Train every requested method on a preprocessed dataset and emit the
    method x protocol x gesture-set results table.

    Returns a dict with the trained models, per-stage histories, alignment
    reports, and the flat list of result rows.
    """
    methods = list(methods)
    out = {"models": {}, "histories": {}, "reports": {}, "results": []}

    pose_mae, hist = run_pretrain(ds, "pose", config)
    out["models"]["pose-mae"] = pose_mae
    out["histories"]["pose-mae"] = hist

    needs_emg_mae = any(m in methods for m in
                        ("cpep", "cpep-frozen", "cpep-avgpool", "emg-mae"))
    emg_mae = None
    if needs_emg_mae:
        emg_mae, hist = run_pretrain(ds, "emg", config)
        out["models"]["emg-mae"] = emg_mae
        out["histories"]["emg-mae"] = hist

    for mode in ("cpep", "cpep-randinit", "cpep-frozen", "cpep-avgpool"):
        if mode not in methods:
            continue
        # frozen pose anchor is shared; hand each mode a fresh EMG tower
        # copy so one mode's training never leaks into another's init
        emg_init = None
        if ABLATION_MODES[mode].get("emg_init", "mae") == "mae":
            emg_init = build_encoder(ds.emg.shape[1], config.emg_patch_len,
                                     seed=config.seed, **config.arch_kwargs())
            emg_init.load_state(emg_mae.state_arrays())
        model, hist, report = run_align(ds, emg_init, pose_mae, config, mode=mode)
        out["models"][mode] = model
        out["histories"][mode] = hist
        out["reports"][mode] = report
        embed = aligned_embed_fn(model)
        embedding = model.config.embedding
        out["results"] += evaluate_linear_probes(mode, embed, ds, config)
        out["results"] += evaluate_zero_shot(mode, embed, ds, model.pose_encoder,
                                             config, embedding=embedding)

    if "emg-mae" in methods:
        embed = encoder_embed_fn(emg_mae)
        out["results"] += evaluate_linear_probes("emg-mae", embed, ds, config)

    if "poset" in methods:
        poset, hist = run_poset(ds, config)
        out["models"]["poset"] = poset
        out["histories"]["poset"] = hist
        out["results"] += evaluate_linear_probes("poset", encoder_embed_fn(poset),
                                                 ds, config)

    if "pose-mae" in methods:
        embed = encoder_embed_fn(pose_mae)
        out["results"] += evaluate_linear_probes("pose-mae", embed, ds, config,
                                                 modality="pose")

    return out


def results_table(rows):
    """Pivot result rows into method x (protocol, gesture_set) macro table."""
    methods = []
    for r in rows:
        if r["method"] not in methods:
            methods.append(r["method"])
    columns = [("LP", "in-dist"), ("ZS", "in-dist"), ("LP", "unseen"), ("ZS", "unseen")]
    table = []
    for m in methods:
        entry = {"method": m}
        for proto, gset in columns:
            hits = [r for r in rows
                    if r["method"] == m and r["protocol"] == proto
                    and r["gesture_set"] == gset]
            entry[f"{proto} {gset}"] = hits[0]["macro_accuracy"] if hits else None
        table.append(entry)
    return table
