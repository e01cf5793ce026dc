"""Masked-autoencoder pre-training and the supervised pose-regression baseline.

One modality at a time: windows are tokenized, a fresh random mask plan is
drawn per window per epoch, the encoder sees only visible tokens, and the
decoder reconstructs every patch. The loss averages the squared L2 error
of the masked patches only.

The supervised baseline (PoseT) reuses the identical architecture with no
masking: the decoder head regresses one pose patch per EMG token and the
loss covers all values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import ShapeError, Tensor
from .optim import AdamW, CosineWarmRestarts
from .transformer import EncoderConfig, EncoderDecoder, patchify, unpatchify

logger = logging.getLogger(__name__)


@dataclass
class MaskPlan:
    token_count: int
    mask_ratio: float
    mask_set: np.ndarray  # sorted masked token indices

    @property
    def visible_set(self):
        return np.setdiff1d(np.arange(self.token_count), self.mask_set)


def mask_size(token_count, mask_ratio):
    """round(K*r) clamped into [1, K-1] so both sides stay nonempty."""
    return int(min(max(round(token_count * mask_ratio), 1), token_count - 1))


def sample_mask(token_count, mask_ratio, rng):
    """Uniformly sample a mask set of size round(K*r), clamped to [1, K-1]."""
    if token_count < 2:
        raise ValueError(f"need at least 2 tokens to mask, got {token_count}")
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {mask_ratio}")
    m = mask_size(token_count, mask_ratio)
    masked = np.sort(rng.permutation(token_count)[:m])
    return MaskPlan(token_count, mask_ratio, masked)


def sample_mask_batch(batch, token_count, mask_ratio, rng):
    """Per-window mask plans; returns (visible_idx (B,V), mask_idx (B,M))."""
    m = mask_size(token_count, mask_ratio)
    vis = np.empty((batch, token_count - m), dtype=np.int64)
    mask = np.empty((batch, m), dtype=np.int64)
    for i in range(batch):
        perm = rng.permutation(token_count)
        mask[i] = np.sort(perm[:m])
        vis[i] = np.sort(perm[m:])
    return vis, mask


def mae_loss(reconstruction, targets, mask_idx):
    """Mean over masked tokens of the squared L2 patch error.

    reconstruction: Tensor (B, K, D); targets: array or Tensor (B, K, D);
    mask_idx: (B, M) masked token indices. Visible positions contribute
    nothing, so their reconstruction gradient is exactly zero.
    """
    if not isinstance(targets, Tensor):
        targets = Tensor(np.asarray(targets, dtype=reconstruction.data.dtype))
    if reconstruction.shape != targets.shape:
        raise ShapeError(
            f"reconstruction shape {reconstruction.shape} != targets {targets.shape}"
        )
    mask_idx = np.asarray(mask_idx)
    if mask_idx.ndim != 2 or mask_idx.shape[1] == 0:
        raise ValueError(f"mask_idx must be (B, M) with M >= 1, got {mask_idx.shape}")
    idx = mask_idx[:, :, None]
    recon_m = ad.gather(reconstruction, idx, axis=1, unique=True)
    target_m = ad.gather(targets, idx, axis=1, unique=True)
    per_token = ad.tensor_sum(ad.squared_error(recon_m, target_m), axis=-1)
    return ad.mean(per_token)


@dataclass
class TrainConfig:
    """Shared knobs for MAE, PoseT, and alignment training loops."""

    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-5
    schedule_period_epochs: int = 10
    schedule_period_mult: int = 2
    lr_min: float = 1e-6
    seed: int = 0
    mask_ratio: float = 0.5
    channel_rotate: bool = True
    rotate_offsets: tuple = (-1, 0, 1)
    target_mode: str = "patch"  # "patch" reconstructs raw inputs; "token"
    # reconstructs stop-gradient tokenizer outputs
    log_every: int = 0  # epochs between progress lines; 0 silences

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.target_mode not in ("patch", "token"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")


def _schedule(config, steps_per_epoch):
    period = max(1, config.schedule_period_epochs * steps_per_epoch)
    return CosineWarmRestarts(config.lr, period, config.schedule_period_mult, config.lr_min)


def _augment(windows, rng, config, modality):
    if modality != "emg" or not config.channel_rotate:
        return windows
    offsets = rng.choice(np.asarray(config.rotate_offsets), size=windows.shape[0])
    return dsp.rotate_channels_batch(windows, offsets)


def build_encoder(in_channels, patch_len, seed, target_mode="patch", **overrides):
    """EncoderDecoder with the decoder head sized for the chosen targets."""
    cfg = EncoderConfig(in_channels=in_channels, patch_len=patch_len, **overrides)
    if target_mode == "token":
        cfg = replace(cfg, head_out_dim=cfg.embed_dim)
    return EncoderDecoder(cfg, rng=np.random.default_rng(seed))


def _mae_epoch(model, windows, config, rng, optimizer, modality):
    n = windows.shape[0]
    order = rng.permutation(n)
    k = model.config.token_count(windows.shape[-1])
    losses = []
    for start in range(0, n, config.batch_size):
        batch = windows[order[start:start + config.batch_size]]
        batch = _augment(batch, rng, config, modality)
        vis_idx, mask_idx = sample_mask_batch(batch.shape[0], k, config.mask_ratio, rng)
        tokens = model.tokenize(batch)
        if config.target_mode == "token":
            targets = tokens.data.copy()  # stop-gradient token targets
        else:
            targets = patchify(batch, model.config.patch_len)
        vis_out, cls = model.encode(tokens, vis_idx)
        recon = model.decode(vis_out, cls, vis_idx, mask_idx)
        loss = mae_loss(recon, targets, mask_idx)
        optimizer.zero_grad()
        loss.backward()
        lr = optimizer.step()
        losses.append((loss.item(), batch.shape[0]))
    total = sum(l * b for l, b in losses)
    count = sum(b for _, b in losses)
    return total / count, lr


def _mae_eval_loss(model, windows, config, seed):
    """Deterministic held-out MAE loss with plans drawn from a fixed stream."""
    rng = np.random.default_rng([seed, 60455])  # keyed off the train seed
    k = model.config.token_count(windows.shape[-1])
    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, windows.shape[0], config.batch_size):
            batch = windows[start:start + config.batch_size]
            vis_idx, mask_idx = sample_mask_batch(batch.shape[0], k, config.mask_ratio, rng)
            tokens = model.tokenize(batch)
            targets = tokens.data.copy() if config.target_mode == "token" else \
                patchify(batch, model.config.patch_len)
            vis_out, cls = model.encode(tokens, vis_idx)
            recon = model.decode(vis_out, cls, vis_idx, mask_idx)
            total += mae_loss(recon, targets, mask_idx).item() * batch.shape[0]
            count += batch.shape[0]
    return total / count


def train_mae(windows, modality, config, model=None, val_windows=None):
    """Self-supervised pre-training over one modality's windows.

    windows: (N, C, T) float32. Returns (model, history) where history is a
    list of dict rows (epoch, split, loss, lr, seed) suitable for a CSV log.
    """
    windows = np.asarray(windows, dtype=np.float32)
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ValueError(f"expected a nonempty (N, C, T) window array, got {windows.shape}")
    if modality not in ("emg", "pose"):
        raise ValueError(f"unknown modality {modality!r}")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = build_encoder(windows.shape[1], 50 if modality == "emg" else 200,
                              seed=config.seed, target_mode=config.target_mode)
    steps_per_epoch = int(np.ceil(windows.shape[0] / config.batch_size))
    optimizer = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay,
                      schedule=_schedule(config, steps_per_epoch))
    history = []
    for epoch in range(config.epochs):
        loss, lr = _mae_epoch(model, windows, config, rng, optimizer, modality)
        history.append({"epoch": epoch, "split": "tr", "loss": loss,
                        "lr": lr, "seed": config.seed})
        if val_windows is not None and len(val_windows):
            val_loss = _mae_eval_loss(model, np.asarray(val_windows, dtype=np.float32),
                                      config, config.seed + epoch)
            history.append({"epoch": epoch, "split": "val", "loss": val_loss,
                            "lr": lr, "seed": config.seed})
        if config.log_every and epoch % config.log_every == 0:
            logger.info("mae[%s] epoch %d loss %.5f lr %.2e", modality, epoch, loss, lr)
    return model, history


# ---------------------------------------------------------------------------
# PoseT: supervised pose regression from EMG with the same architecture
# ---------------------------------------------------------------------------

def poset_loss(prediction, pose_targets):
    """Mean squared error over every pose value."""
    if not isinstance(pose_targets, Tensor):
        pose_targets = Tensor(np.asarray(pose_targets, dtype=prediction.data.dtype))
    if prediction.shape != pose_targets.shape:
        raise ShapeError(
            f"prediction shape {prediction.shape} != targets {pose_targets.shape}"
        )
    return ad.mean(ad.squared_error(prediction, pose_targets))


def build_poset_encoder(emg_channels, pose_joints, emg_patch_len, seed, **overrides):
    cfg = EncoderConfig(in_channels=emg_channels, patch_len=emg_patch_len,
                        head_out_dim=pose_joints * emg_patch_len, **overrides)
    return EncoderDecoder(cfg, rng=np.random.default_rng(seed))


def poset_forward(model, emg_batch):
    """Full-sequence encode + decode; returns pose patches (B, K, J*S)."""
    tokens = model.tokenize(emg_batch)
    b, k, _ = tokens.shape
    vis_idx = np.broadcast_to(np.arange(k), (b, k))
    vis_out, cls = model.encode(tokens, vis_idx)
    return model.decode(vis_out, cls, vis_idx, np.empty((b, 0), dtype=np.int64))


def train_poset(emg_windows, pose_windows, config, model=None):
    """Supervised EMG -> pose regression sharing the MAE architecture."""
    emg_windows = np.asarray(emg_windows, dtype=np.float32)
    pose_windows = np.asarray(pose_windows, dtype=np.float32)
    if emg_windows.shape[0] != pose_windows.shape[0]:
        raise ValueError(
            f"unpaired data: {emg_windows.shape[0]} EMG vs {pose_windows.shape[0]} pose windows"
        )
    if emg_windows.shape[0] == 0:
        raise ValueError("empty paired dataset")
    if emg_windows.shape[-1] != pose_windows.shape[-1]:
        raise ValueError("EMG and pose windows must share the time axis")
    rng = np.random.default_rng(config.seed)
    joints = pose_windows.shape[1]
    if model is None:
        model = build_poset_encoder(emg_windows.shape[1], joints, 50, seed=config.seed)
    patch_len = model.config.patch_len
    steps_per_epoch = int(np.ceil(emg_windows.shape[0] / config.batch_size))
    optimizer = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay,
                      schedule=_schedule(config, steps_per_epoch))
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(emg_windows.shape[0])
        losses = []
        for start in range(0, emg_windows.shape[0], config.batch_size):
            sel = order[start:start + config.batch_size]
            emg = _augment(emg_windows[sel], rng, config, "emg")
            targets = patchify(pose_windows[sel], patch_len)
            pred = poset_forward(model, emg)
            loss = poset_loss(pred, targets)
            optimizer.zero_grad()
            loss.backward()
            lr = optimizer.step()
            losses.append((loss.item(), len(sel)))
        epoch_loss = sum(l * b for l, b in losses) / sum(b for _, b in losses)
        history.append({"epoch": epoch, "split": "tr", "loss": epoch_loss,
                        "lr": lr, "seed": config.seed})
        if config.log_every and epoch % config.log_every == 0:
            logger.info("poset epoch %d loss %.5f lr %.2e", epoch, epoch_loss, lr)
    return model, history


def predict_pose(model, emg_windows, batch_size=256):
    """Regressed pose (N, J, T) for EMG windows, reshaped from patch outputs."""
    emg_windows = np.asarray(emg_windows, dtype=np.float32)
    s = model.config.patch_len
    joints = model.config.head_out_dim // s
    outs = []
    with ad.no_grad():
        for start in range(0, emg_windows.shape[0], batch_size):
            pred = poset_forward(model, emg_windows[start:start + batch_size])
            outs.append(unpatchify(pred.data, joints))
    return np.concatenate(outs, axis=0)
