"""Contrastive alignment of the EMG encoder to a frozen pose anchor.

Paired windows are embedded as u = head(EMG encoder CLS) and
v = pose encoder CLS; rows are l2-normalized and scored with cosine
similarity scaled by a learnable temperature, then pulled together /
pushed apart with the symmetric InfoNCE objective. The pose encoder is
frozen, so its embeddings are computed once up front and reused across
every epoch.

Ablation modes cover random EMG-encoder init, freezing the EMG encoder
(head only), average-pool embeddings, and the expected-to-fail variants
that randomize or unfreeze the pose anchor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .mae import TrainConfig, _augment, _schedule, build_encoder
from .optim import AdamW
from .transformer import truncated_normal

logger = logging.getLogger(__name__)

TEMP_MIN = 0.005
TEMP_MAX = 1.0


def normalize_rows(m, eps=1e-8):
    """Divide each row by max(norm, eps). Accepts a Tensor (differentiable
    path) or a plain array."""
    if isinstance(m, Tensor):
        norms = ad.sqrt(ad.tensor_sum(ad.mul(m, m), axis=-1, keepdims=True))
        return ad.div(m, ad.clip_min(norms, eps))
    m = np.asarray(m)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return m / np.maximum(norms, eps)


def infonce_loss(s):
    """Symmetric InfoNCE over a square score matrix (Tensor or array).

    L = (1/2N) sum_i [ -log softmax_row(s)_ii - log softmax_col(s)_ii ],
    computed through log-softmax for log-sum-exp stability.
    """
    if not isinstance(s, Tensor):
        s = Tensor(np.asarray(s))
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"InfoNCE needs a square score matrix, got {s.shape}")
    n = s.shape[0]
    diag = np.arange(n)[:, None]
    rows = ad.gather(ad.log_softmax(s, axis=1), diag, axis=1, unique=True)
    cols = ad.gather(ad.transpose(ad.log_softmax(s, axis=0)), diag, axis=1, unique=True)
    return ad.scale(ad.mean(rows) + ad.mean(cols), -0.5)


@dataclass
class AlignConfig(TrainConfig):
    """CPEP-specific settings on top of the shared training knobs."""

    temperature_init: float = 0.02
    head: str = "affine"  # or "mlp" (affine-GELU-affine)
    embedding: str = "cls"  # or "avgpool"
    emg_init: str = "mae"  # or "random"
    pose_init: str = "mae"  # or "random"
    train_emg_encoder: bool = True
    train_pose_encoder: bool = False

    def __post_init__(self):
        super().__post_init__()
        if not TEMP_MIN <= self.temperature_init <= TEMP_MAX:
            raise ValueError(
                f"temperature_init must lie in [{TEMP_MIN}, {TEMP_MAX}]"
            )
        if self.head not in ("affine", "mlp"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.embedding not in ("cls", "avgpool"):
            raise ValueError(f"unknown embedding mode {self.embedding!r}")


ABLATION_MODES = {
    # Ablation presets: overrides applied on top of an AlignConfig.
    "cpep": {},
    "cpep-randinit": {"emg_init": "random"},
    "cpep-frozen": {"train_emg_encoder": False},
    "cpep-avgpool": {"embedding": "avgpool"},
    "cpep-randboth": {"emg_init": "random", "pose_init": "random"},
    "cpep-trainpose": {"train_pose_encoder": True},
}


class AlignmentModel:
    """Trainable EMG tower (encoder + projection head + temperature) against
    a pose anchor tower."""

    def __init__(self, emg_encoder, pose_encoder, config, rng=None):
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        self.emg_encoder = emg_encoder
        self.pose_encoder = pose_encoder
        if config.train_pose_encoder:
            self.pose_encoder.unfreeze()
        else:
            self.pose_encoder.freeze()
        if config.train_emg_encoder:
            self.emg_encoder.unfreeze()
        else:
            self.emg_encoder.freeze()
        d = emg_encoder.config.embed_dim
        dtype = emg_encoder.dtype
        self.head_params = {}

        def head_param(name, data):
            self.head_params[name] = Parameter(data, name=name)

        head_param("proj.w1", truncated_normal(rng, (d, d), dtype=dtype))
        head_param("proj.b1", np.zeros(d, dtype=dtype))
        if config.head == "mlp":
            head_param("proj.w2", truncated_normal(rng, (d, d), dtype=dtype))
            head_param("proj.b2", np.zeros(d, dtype=dtype))
        self.logit_scale = Parameter(
            np.asarray(np.log(1.0 / config.temperature_init), dtype=dtype),
            name="logit_scale",
        )

    # -- parameter plumbing -------------------------------------------------
    def trainable_params(self):
        params = dict(self.head_params)
        params["logit_scale"] = self.logit_scale
        if self.config.train_emg_encoder:
            params.update({f"emg.{k}": p for k, p in self.emg_encoder.params.items()})
        if self.config.train_pose_encoder:
            params.update({f"pose.{k}": p for k, p in self.pose_encoder.params.items()})
        return params

    def state_arrays(self):
        out = {f"emg.{k}": v for k, v in self.emg_encoder.state_arrays().items()}
        out.update({f"pose.{k}": v for k, v in self.pose_encoder.state_arrays().items()})
        out.update({k: p.data.copy() for k, p in self.head_params.items()})
        out["logit_scale"] = self.logit_scale.data.copy()
        return out

    def load_state(self, arrays):
        self.emg_encoder.load_state(
            {k[4:]: v for k, v in arrays.items() if k.startswith("emg.")}
        )
        self.pose_encoder.load_state(
            {k[5:]: v for k, v in arrays.items() if k.startswith("pose.")}
        )
        for k, p in self.head_params.items():
            p.data = np.asarray(arrays[k], dtype=p.data.dtype).reshape(p.data.shape).copy()
        self.logit_scale.data = np.asarray(
            arrays["logit_scale"], dtype=self.logit_scale.data.dtype
        ).reshape(())

    @property
    def temperature(self):
        return float(np.exp(-self.logit_scale.data))

    def clamp_temperature(self):
        lo, hi = np.log(1.0 / TEMP_MAX), np.log(1.0 / TEMP_MIN)
        self.logit_scale.data = np.clip(self.logit_scale.data, lo, hi).astype(
            self.logit_scale.data.dtype, copy=False
        )

    # -- embeddings -----------------------------------------------------------
    def project(self, emb):
        h = ad.matmul(emb, self.head_params["proj.w1"]) + self.head_params["proj.b1"]
        if self.config.head == "mlp":
            h = ad.matmul(ad.gelu(h), self.head_params["proj.w2"]) + self.head_params["proj.b2"]
        return h

    def emg_embedding(self, windows):
        """u = head(EMG encoder summary); Tensor (B, d)."""
        if not self.config.train_emg_encoder:
            # frozen tower: keep the encoder off the tape, train the head only
            with ad.no_grad():
                summary = self.emg_encoder.embedding(windows, self.config.embedding)
            return self.project(Tensor(summary.data))
        return self.project(self.emg_encoder.embedding(windows, self.config.embedding))

    def pose_embedding(self, windows):
        """v = pose encoder summary, no projection head; Tensor (B, d)."""
        return self.pose_encoder.embedding(windows, self.config.embedding)


def embed_pair(model, emg_windows, pose_windows):
    """(u, v) per paired window; v never receives gradients."""
    emg_windows = np.asarray(emg_windows, dtype=np.float32)
    pose_windows = np.asarray(pose_windows, dtype=np.float32)
    if emg_windows.shape[0] != pose_windows.shape[0]:
        raise ShapeError("embed_pair needs matched EMG/pose batches")
    if emg_windows.shape[1] != model.emg_encoder.config.in_channels:
        raise ShapeError(
            f"EMG input has {emg_windows.shape[1]} channels, encoder expects "
            f"{model.emg_encoder.config.in_channels} (modality mix-up?)"
        )
    if pose_windows.shape[1] != model.pose_encoder.config.in_channels:
        raise ShapeError(
            f"pose input has {pose_windows.shape[1]} channels, encoder expects "
            f"{model.pose_encoder.config.in_channels} (modality mix-up?)"
        )
    u = model.emg_embedding(emg_windows)
    if model.config.train_pose_encoder:
        v = model.pose_embedding(pose_windows)
    else:
        with ad.no_grad():
            v = model.pose_embedding(pose_windows)
    return u, v


def similarity_matrix(model, u, v):
    """Scaled cosine similarities s_ij = (u_i . v_j) * exp(logit_scale)."""
    un = normalize_rows(u)
    vn = normalize_rows(v) if isinstance(v, Tensor) else Tensor(normalize_rows(v))
    return ad.mul(ad.matmul(un, ad.transpose(vn)), ad.exp(model.logit_scale))


def in_batch_retrieval_at_1(scores):
    """Fraction of rows whose best column is the matching pair."""
    return float(np.mean(np.argmax(scores, axis=1) == np.arange(scores.shape[0])))


def _warn_duplicate_poses(v_batch, epoch):
    _, counts = np.unique(v_batch.round(decimals=6), axis=0, return_counts=True)
    dup = int((counts > 1).sum())
    if dup:
        logger.warning(
            "epoch %d: %d duplicated pose embeddings in batch (false negatives)",
            epoch, dup,
        )


def build_alignment_model(config, emg_mae=None, pose_mae=None, emg_channels=None,
                          pose_joints=None, emg_patch_len=50, pose_patch_len=200,
                          arch_kwargs=None):
    """Assemble the two towers per the config's init modes. Random towers
    take their architecture from `arch_kwargs` (else the counterpart MAE)."""
    rng = np.random.default_rng([config.seed, 7])

    def random_tower(channels, patch_len, template):
        kwargs = dict(arch_kwargs or {})
        if not kwargs and template is not None:
            c = template.config
            kwargs = dict(embed_dim=c.embed_dim, encoder_layers=c.encoder_layers,
                          decoder_layers=c.decoder_layers, heads=c.heads,
                          mlp_ratio=c.mlp_ratio)
        return build_encoder(channels, patch_len, seed=int(rng.integers(2**31)),
                             **kwargs)

    if config.emg_init == "mae":
        if emg_mae is None:
            raise ValueError("emg_init='mae' needs a pre-trained EMG encoder")
        emg_encoder = emg_mae
    else:
        if emg_channels is None and emg_mae is None:
            raise ValueError("random EMG init needs emg_channels")
        emg_encoder = random_tower(emg_channels or emg_mae.config.in_channels,
                                   emg_patch_len, emg_mae or pose_mae)
    if config.pose_init == "mae":
        if pose_mae is None:
            raise ValueError("pose_init='mae' needs a pre-trained pose encoder")
        pose_encoder = pose_mae
    else:
        if pose_joints is None and pose_mae is None:
            raise ValueError("random pose init needs pose_joints")
        pose_encoder = random_tower(pose_joints or pose_mae.config.in_channels,
                                    pose_patch_len, pose_mae or emg_mae)
    return AlignmentModel(emg_encoder, pose_encoder, config, rng=rng)


def train_cpep(emg_windows, pose_windows, model, config, convergence_threshold=0.5):
    """Contrastive alignment over paired windows.

    Returns (model, history, report). history rows carry (epoch, loss, tau,
    retrieval_at_1); report states whether training converged (final-epoch
    in-batch retrieval@1 above `convergence_threshold`) so that the
    expected-to-fail ablations can surface a non-convergence record instead
    of an assertion.
    """
    emg_windows = np.asarray(emg_windows, dtype=np.float32)
    pose_windows = np.asarray(pose_windows, dtype=np.float32)
    if emg_windows.shape[0] == 0:
        raise ValueError("empty paired dataset")
    if emg_windows.shape[0] != pose_windows.shape[0]:
        raise ValueError(
            f"unpaired data: {emg_windows.shape[0]} EMG vs {pose_windows.shape[0]} pose windows"
        )
    rng = np.random.default_rng(config.seed)
    n = emg_windows.shape[0]

    pose_frozen = not config.train_pose_encoder
    v_all = None
    if pose_frozen:
        v_all = np.empty((n, model.pose_encoder.config.embed_dim), dtype=np.float32)
        with ad.no_grad():
            for start in range(0, n, config.batch_size):
                v = model.pose_embedding(pose_windows[start:start + config.batch_size])
                v_all[start:start + config.batch_size] = v.data
        v_all = normalize_rows(v_all)

    optimizer = AdamW(model.trainable_params(), lr=config.lr,
                      weight_decay=config.weight_decay,
                      schedule=_schedule(config, int(np.ceil(n / config.batch_size))))
    history = []
    retrieval = 0.0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses, hits, seen = [], 0.0, 0
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            if len(sel) < 2:
                continue  # a single positive carries no contrastive signal
            emg = _augment(emg_windows[sel], rng, config, "emg")
            u = model.emg_embedding(emg)
            if pose_frozen:
                vn = Tensor(v_all[sel])
            else:
                vn = normalize_rows(model.pose_embedding(pose_windows[sel]))
            _warn_duplicate_poses(vn.data, epoch)
            un = normalize_rows(u)
            s = ad.mul(ad.matmul(un, ad.transpose(vn)), ad.exp(model.logit_scale))
            loss = infonce_loss(s)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            model.clamp_temperature()
            losses.append((loss.item(), len(sel)))
            hits += in_batch_retrieval_at_1(s.data) * len(sel)
            seen += len(sel)
        epoch_loss = sum(l * b for l, b in losses) / max(1, sum(b for _, b in losses))
        retrieval = hits / max(1, seen)
        history.append({"epoch": epoch, "loss": epoch_loss,
                        "tau": model.temperature, "retrieval_at_1": retrieval})
        if config.log_every and epoch % config.log_every == 0:
            logger.info("cpep epoch %d loss %.4f tau %.4f r@1 %.3f",
                        epoch, epoch_loss, model.temperature, retrieval)
    report = {
        "converged": retrieval >= convergence_threshold,
        "final_retrieval_at_1": retrieval,
        "threshold": convergence_threshold,
        "epochs": config.epochs,
    }
    if not report["converged"]:
        logger.warning("cpep did not converge: final retrieval@1 %.3f < %.3f",
                       retrieval, convergence_threshold)
    return model, history, report
