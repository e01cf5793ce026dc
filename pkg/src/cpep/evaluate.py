"""Zero-shot retrieval classification, linear probing, and macro accuracy.

Zero-shot: pose windows of the evaluation pool are embedded once through
the frozen pose encoder into a unit-norm index; each EMG query retrieves
its top-k entries by cosine similarity and takes a majority vote over
their gesture labels. Ties break by (1) larger summed similarity among the
tied labels, then (2) smaller label id. Retrieval is exact: entries are
ranked by (-similarity, insertion order).

Linear probing: a softmax affine head trained with cross-entropy on frozen
embeddings, with early stopping on a held-out tuning split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .align import normalize_rows
from .autodiff import Parameter, Tensor
from .optim import AdamW

logger = logging.getLogger(__name__)


class EmbeddingIndex:
    """Unit-norm pose embeddings with labels, ordered by window id."""

    def __init__(self, embeddings, labels, window_ids):
        embeddings = np.asarray(embeddings, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        window_ids = np.asarray(window_ids, dtype=np.int64)
        if embeddings.ndim != 2 or embeddings.shape[0] == 0:
            raise ValueError(f"index needs (n, d) embeddings, got {embeddings.shape}")
        if not (len(labels) == len(window_ids) == embeddings.shape[0]):
            raise ValueError("embeddings, labels and window_ids must align")
        order = np.argsort(window_ids, kind="stable")
        self.embeddings = normalize_rows(embeddings[order])
        self.labels = labels[order]
        self.window_ids = window_ids[order]

    def __len__(self):
        return len(self.labels)

    def top_k(self, queries, k):
        """Exact top-k per query row: (indices (m, k), similarities (m, k)).

        queries are normalized here; ranking is by descending similarity
        with ties broken by index order (stable sort)."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
        if k < 1 or k > len(self):
            raise ValueError(f"k={k} outside [1, {len(self)}]")
        sims = normalize_rows(queries) @ self.embeddings.T
        idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        return idx, np.take_along_axis(sims, idx, axis=1)


def build_pose_index(pose_windows, labels, window_ids, pose_encoder,
                     embedding="cls", batch_size=128):
    """Embed pose windows through the frozen encoder into an index."""
    pose_windows = np.asarray(pose_windows, dtype=np.float32)
    if pose_windows.shape[0] == 0:
        raise ValueError("cannot build an index from zero pose windows")
    embs = encode_windows(pose_encoder, pose_windows, embedding, batch_size)
    return EmbeddingIndex(embs, labels, window_ids)


def encode_windows(encoder, windows, embedding="cls", batch_size=128):
    """Tape-free batched embedding extraction, (n, d) float32."""
    windows = np.asarray(windows, dtype=np.float32)
    out = np.empty((windows.shape[0], encoder.config.embed_dim), dtype=np.float32)
    with ad.no_grad():
        for start in range(0, windows.shape[0], batch_size):
            emb = encoder.embedding(windows[start:start + batch_size], embedding)
            out[start:start + batch_size] = emb.data
    return out


def vote(labels, sims):
    """Majority vote with the summed-similarity then smaller-id tie-break."""
    labels = np.asarray(labels)
    sims = np.asarray(sims, dtype=np.float64)
    best_label, best_key = None, None
    for label in np.unique(labels):  # np.unique ascends, so smaller id wins ties
        sel = labels == label
        key = (int(sel.sum()), float(sims[sel].sum()))
        if best_key is None or key > best_key:
            best_label, best_key = int(label), key
    return best_label


def zero_shot_predict(query_embeddings, index, k=10):
    """Vote-based gesture prediction for each query embedding row."""
    queries = np.atleast_2d(np.asarray(query_embeddings, dtype=np.float32))
    if len(index) < k:
        raise ValueError(f"index holds {len(index)} entries, fewer than k={k}")
    idx, sims = index.top_k(queries, k)
    return np.asarray([vote(index.labels[idx[i]], sims[i]) for i in range(len(queries))],
                      dtype=np.int64)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    lr: float = 1e-2
    epochs: int = 100
    batch_size: int = 256
    weight_decay: float = 1e-5
    seed: int = 0


class ProbeHead:
    """Softmax affine classifier over frozen embeddings."""

    def __init__(self, weight, bias, classes):
        self.weight = weight  # (d, n_classes) float32
        self.bias = bias
        self.classes = classes  # original label for each output column

    def logits(self, embeddings):
        return np.asarray(embeddings, dtype=np.float32) @ self.weight + self.bias

    def predict(self, embeddings):
        return self.classes[np.argmax(self.logits(embeddings), axis=1)]

    def predict_proba(self, embeddings):
        z = self.logits(embeddings)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def accuracy(self, embeddings, labels):
        return float(np.mean(self.predict(embeddings) == np.asarray(labels)))


def _cross_entropy(w, b, emb, targets):
    logits = ad.matmul(Tensor(emb), w) + b
    logp = ad.log_softmax(logits, axis=1)
    picked = ad.gather(logp, targets[:, None], axis=1, unique=True)
    return ad.scale(ad.mean(picked), -1.0)


def train_linear_probe(embeddings, labels, config=None, tune_embeddings=None,
                       tune_labels=None):
    """Cross-entropy training of an affine head on frozen embeddings.

    When a tuning split is given, training early-stops on its accuracy
    (best epoch wins; earlier epoch on ties). Raises on a single-class
    training set.
    """
    config = config or ProbeConfig()
    embeddings = np.asarray(embeddings, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError(f"probe needs >= 2 classes, got {classes.tolist()}")
    class_of = {c: i for i, c in enumerate(classes)}
    targets = np.asarray([class_of[v] for v in labels], dtype=np.int64)
    tune_targets = None
    if tune_embeddings is not None:
        tune_embeddings = np.asarray(tune_embeddings, dtype=np.float32)
        tune_targets = np.asarray(tune_labels, dtype=np.int64)

    rng = np.random.default_rng(config.seed)
    d = embeddings.shape[1]
    w = Parameter(np.zeros((d, len(classes)), dtype=np.float32), name="probe.w")
    b = Parameter(np.zeros(len(classes), dtype=np.float32), name="probe.b")
    optimizer = AdamW([w, b], lr=config.lr, weight_decay=config.weight_decay)

    best = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(embeddings))
        for start in range(0, len(order), config.batch_size):
            sel = order[start:start + config.batch_size]
            loss = _cross_entropy(w, b, embeddings[sel], targets[sel])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        if tune_targets is not None:
            head = ProbeHead(w.data.copy(), b.data.copy(), classes)
            acc = head.accuracy(tune_embeddings, tune_labels)
            if best is None or acc > best[0]:
                best = (acc, epoch, head)
    if best is not None:
        logger.info("probe early stop: epoch %d, tune accuracy %.3f", best[1], best[0])
        return best[2]
    return ProbeHead(w.data.copy(), b.data.copy(), classes)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def per_class_recall(predictions, labels, classes=None):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if classes is None:
        classes = np.unique(labels)
    out = {}
    for c in classes:
        sel = labels == c
        if not sel.any():
            raise ValueError(f"class {c} absent from labels")
        key = c.item() if hasattr(c, "item") else c
        out[key] = float(np.mean(predictions[sel] == c))
    return out


def macro_accuracy(predictions, labels, classes=None):
    """Mean per-class recall in [0, 1]."""
    recalls = per_class_recall(predictions, labels, classes)
    return float(np.mean(list(recalls.values())))
