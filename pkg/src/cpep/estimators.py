"""Estimator-style public API: fit/transform/predict wrappers around the
training and evaluation machinery, compatible with scikit-learn tooling
(get_params/set_params, clone, pipelines over precomputed embeddings).

Typical composition::

    pre   = EmgPreprocessor(sample_rate=2000.0)
    emg   = MaskedAutoencoder(in_channels=16, patch_len=50).fit(X_emg)
    pose  = MaskedAutoencoder(in_channels=20, patch_len=200).fit(X_pose)
    align = ContrastivePoseEmgAligner(emg, pose).fit(X_emg, X_pose)
    zs    = ZeroShotGestureClassifier(align, k=10).fit(P_eval, y_eval)
    y_hat = zs.predict(X_query)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import dsp
from .align import AlignConfig, build_alignment_model, train_cpep
from .evaluate import (
    EmbeddingIndex,
    ProbeConfig,
    encode_windows,
    train_linear_probe,
    zero_shot_predict,
)
from .mae import TrainConfig, build_encoder, train_mae
from .validation import (
    check_embeddings,
    check_fitted,
    check_labels,
    check_paired,
    check_windows,
)


class EmgPreprocessor(BaseEstimator, TransformerMixin):
    """Stateless conditioning of raw EMG recordings into training windows:
    zero-phase band-pass + notch, non-overlapping windowing, per-channel
    instance normalization."""

    def __init__(self, sample_rate=2000.0, band=(2.0, 250.0), notch_hz=60.0,
                 window_s=2.0, filter_signal=True, normalize=True):
        self.sample_rate = sample_rate
        self.band = band
        self.notch_hz = notch_hz
        self.window_s = window_s
        self.filter_signal = filter_signal
        self.normalize = normalize

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        """(n_recordings, C, T_rec) or list of (C, T_i) -> stacked windows."""
        recordings = list(X) if not isinstance(X, np.ndarray) else list(X)
        out = []
        for rec in recordings:
            rec = np.asarray(rec, dtype=np.float32)
            if self.filter_signal:
                rec = dsp.bandpass_notch(rec, self.sample_rate, band=self.band,
                                         notch_hz=self.notch_hz)
            wins = dsp.make_windows(rec, self.sample_rate, self.window_s)
            if self.normalize:
                wins = dsp.instance_normalize(wins)
            out.append(wins)
        if not out:
            raise ValueError("no recordings given")
        return np.concatenate(out, axis=0)


class MaskedAutoencoder(BaseEstimator, TransformerMixin):
    """Self-supervised encoder for one modality; transform() returns the
    window-summary embeddings of the fitted encoder."""

    def __init__(self, in_channels, patch_len, embed_dim=256, encoder_layers=4,
                 decoder_layers=2, heads=4, mask_ratio=0.5, epochs=100,
                 batch_size=256, lr=1e-4, weight_decay=1e-5,
                 schedule_period_epochs=10, channel_rotate=False,
                 modality="emg", embedding="cls", seed=0):
        self.in_channels = in_channels
        self.patch_len = patch_len
        self.embed_dim = embed_dim
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.heads = heads
        self.mask_ratio = mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule_period_epochs = schedule_period_epochs
        self.channel_rotate = channel_rotate
        self.modality = modality
        self.embedding = embedding
        self.seed = seed
        self.encoder_ = None
        self.history_ = None

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay,
            schedule_period_epochs=self.schedule_period_epochs,
            seed=self.seed, mask_ratio=self.mask_ratio,
            channel_rotate=self.channel_rotate)

    def fit(self, X, y=None, val_windows=None):
        X = check_windows(X, channels=self.in_channels,
                          min_timesteps=self.patch_len)
        model = build_encoder(self.in_channels, self.patch_len, seed=self.seed,
                              embed_dim=self.embed_dim,
                              encoder_layers=self.encoder_layers,
                              decoder_layers=self.decoder_layers, heads=self.heads)
        self.encoder_, self.history_ = train_mae(
            X, self.modality, self._train_config(), model=model,
            val_windows=val_windows)
        return self

    def transform(self, X):
        check_fitted(self, "encoder_")
        X = check_windows(X, channels=self.in_channels,
                          min_timesteps=self.patch_len)
        return encode_windows(self.encoder_, X, self.embedding,
                              batch_size=self.batch_size)


class ContrastivePoseEmgAligner(BaseEstimator, TransformerMixin):
    """Aligns a trainable EMG tower (encoder + projection head) to a frozen
    pose anchor with symmetric InfoNCE. transform() maps EMG windows into
    the shared space; pose_transform() maps pose windows."""

    def __init__(self, emg_encoder=None, pose_encoder=None, epochs=100,
                 batch_size=256, lr=1e-4, weight_decay=1e-5,
                 schedule_period_epochs=10, temperature_init=0.02,
                 projection_head="affine", embedding="cls", emg_init="mae",
                 pose_init="mae", train_emg_encoder=True,
                 train_pose_encoder=False, channel_rotate=False, seed=0):
        self.emg_encoder = emg_encoder
        self.pose_encoder = pose_encoder
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule_period_epochs = schedule_period_epochs
        self.temperature_init = temperature_init
        self.projection_head = projection_head
        self.embedding = embedding
        self.emg_init = emg_init
        self.pose_init = pose_init
        self.train_emg_encoder = train_emg_encoder
        self.train_pose_encoder = train_pose_encoder
        self.channel_rotate = channel_rotate
        self.seed = seed
        self.model_ = None
        self.history_ = None
        self.report_ = None

    def _align_config(self):
        return AlignConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay,
            schedule_period_epochs=self.schedule_period_epochs,
            seed=self.seed, channel_rotate=self.channel_rotate,
            temperature_init=self.temperature_init, head=self.projection_head,
            embedding=self.embedding, emg_init=self.emg_init,
            pose_init=self.pose_init,
            train_emg_encoder=self.train_emg_encoder,
            train_pose_encoder=self.train_pose_encoder)

    @staticmethod
    def _tower(maybe_estimator):
        if maybe_estimator is None:
            return None
        encoder = getattr(maybe_estimator, "encoder_", maybe_estimator)
        if encoder is None:
            raise RuntimeError("the given MaskedAutoencoder is not fitted yet")
        return encoder

    def fit(self, X, P, y=None):
        """X: EMG windows (n, C, T); P: paired pose windows (n, J, T)."""
        X = check_windows(X, name="X")
        P = check_windows(P, name="P")
        check_paired(X, P)
        config = self._align_config()
        model = build_alignment_model(
            config, emg_mae=self._tower(self.emg_encoder),
            pose_mae=self._tower(self.pose_encoder),
            emg_channels=X.shape[1], pose_joints=P.shape[1])
        self.model_, self.history_, self.report_ = train_cpep(X, P, model, config)
        return self

    @property
    def temperature_(self):
        check_fitted(self, "model_")
        return self.model_.temperature

    def transform(self, X):
        """Aligned (post-projection) EMG embeddings, (n, d)."""
        check_fitted(self, "model_")
        from . import autodiff as ad
        X = check_windows(X, name="X",
                          channels=self.model_.emg_encoder.config.in_channels)
        out = np.empty((X.shape[0], self.model_.emg_encoder.config.embed_dim),
                       dtype=np.float32)
        with ad.no_grad():
            for start in range(0, X.shape[0], self.batch_size):
                u = self.model_.emg_embedding(X[start:start + self.batch_size])
                out[start:start + self.batch_size] = u.data
        return out

    def pose_transform(self, P):
        """Anchor-side pose embeddings, (n, d)."""
        check_fitted(self, "model_")
        P = check_windows(P, name="P",
                          channels=self.model_.pose_encoder.config.in_channels)
        return encode_windows(self.model_.pose_encoder, P, self.embedding,
                              batch_size=self.batch_size)


class ZeroShotGestureClassifier(BaseEstimator, ClassifierMixin):
    """Gesture labels by top-k cosine retrieval against pose embeddings.

    fit() embeds the reference pose windows through the aligner's frozen
    pose tower; predict() embeds EMG queries through the aligned EMG tower
    and majority-votes the retrieved labels.
    """

    def __init__(self, aligner, k=10):
        self.aligner = aligner
        self.k = k
        self.index_ = None
        self.classes_ = None

    def fit(self, P, y):
        P = check_windows(P, name="P")
        y = check_labels(y, P.shape[0])
        embeddings = self.aligner.pose_transform(P)
        self.index_ = EmbeddingIndex(embeddings, y, np.arange(P.shape[0]))
        self.classes_ = np.unique(y)
        return self

    def predict(self, X):
        check_fitted(self, "index_")
        queries = self.aligner.transform(X)
        return zero_shot_predict(queries, self.index_, k=self.k)

    def score(self, X, y):
        from .evaluate import macro_accuracy
        return macro_accuracy(self.predict(X), np.asarray(y))


class LinearProbe(BaseEstimator, ClassifierMixin):
    """Softmax affine classifier over frozen embeddings (representation-
    quality probe)."""

    def __init__(self, lr=1e-2, epochs=100, batch_size=256, weight_decay=1e-5,
                 seed=0):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed
        self.head_ = None
        self.classes_ = None

    def fit(self, Z, y, tune_Z=None, tune_y=None):
        Z = check_embeddings(Z)
        y = check_labels(y, Z.shape[0])
        config = ProbeConfig(lr=self.lr, epochs=self.epochs,
                             batch_size=self.batch_size,
                             weight_decay=self.weight_decay, seed=self.seed)
        self.head_ = train_linear_probe(Z, y, config, tune_embeddings=tune_Z,
                                        tune_labels=tune_y)
        self.classes_ = self.head_.classes
        return self

    def predict(self, Z):
        check_fitted(self, "head_")
        return self.head_.predict(check_embeddings(Z, dim=self.head_.weight.shape[0]))

    def predict_proba(self, Z):
        check_fitted(self, "head_")
        return self.head_.predict_proba(check_embeddings(Z, dim=self.head_.weight.shape[0]))

    def score(self, Z, y):
        from .evaluate import macro_accuracy
        return macro_accuracy(self.predict(Z), np.asarray(y))
