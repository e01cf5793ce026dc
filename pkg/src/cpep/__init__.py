"""Contrastive pose-EMG pre-training toolkit.

Self-supervised masked-autoencoder pre-training for EMG and pose windows,
contrastive alignment of the EMG encoder to the frozen pose anchor, and
gesture classification by linear probing or zero-shot retrieval, all on a
small reverse-mode autodiff engine over numpy.

The estimator classes are the primary API; the functional layer underneath
(`cpep.mae`, `cpep.align`, `cpep.evaluate`, ...) is importable directly for
finer control, and `cpep.cli` drives full experiments from the command
line.
"""

from .align import AlignConfig, AlignmentModel, infonce_loss, normalize_rows, train_cpep
from .data import (
    Dataset,
    DatasetManifest,
    SplitSpec,
    SynthConfig,
    load_dataset,
    make_splits,
    synth_generate,
    write_dataset,
)
from .estimators import (
    ContrastivePoseEmgAligner,
    EmgPreprocessor,
    LinearProbe,
    MaskedAutoencoder,
    ZeroShotGestureClassifier,
)
from .evaluate import EmbeddingIndex, macro_accuracy, zero_shot_predict
from .mae import TrainConfig, mae_loss, sample_mask, train_mae, train_poset
from .pipeline import PipelineConfig, run_experiment
from .transformer import EncoderConfig, EncoderDecoder

__version__ = "0.1.0"

__all__ = [
    "AlignConfig",
    "AlignmentModel",
    "ContrastivePoseEmgAligner",
    "Dataset",
    "DatasetManifest",
    "EmbeddingIndex",
    "EmgPreprocessor",
    "EncoderConfig",
    "EncoderDecoder",
    "LinearProbe",
    "MaskedAutoencoder",
    "PipelineConfig",
    "SplitSpec",
    "SynthConfig",
    "TrainConfig",
    "ZeroShotGestureClassifier",
    "infonce_loss",
    "load_dataset",
    "macro_accuracy",
    "mae_loss",
    "make_splits",
    "normalize_rows",
    "run_experiment",
    "sample_mask",
    "synth_generate",
    "train_cpep",
    "train_mae",
    "train_poset",
    "write_dataset",
    "zero_shot_predict",
]
