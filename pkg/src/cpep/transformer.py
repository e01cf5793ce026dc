"""Patch tokenizer plus encoder-decoder Transformer for one modality.

A window (channels x timesteps) is cut into K = floor(T / patch_len)
non-overlapping temporal patches, each flattened time-major across
channels and affinely projected to the embedding dimension. The encoder
consumes a learned [CLS] vector plus the visible tokens (with fixed
sinusoidal position encodings added by original token index); the decoder
re-inserts a shared learned mask embedding at the hidden positions and
emits one output vector per token position.

Blocks are pre-layer-norm with 4-head attention and a 4x MLP; both stacks
end with a final layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor


@dataclass
class EncoderConfig:
    in_channels: int
    patch_len: int
    embed_dim: int = 256
    encoder_layers: int = 4
    decoder_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    head_out_dim: int | None = None  # decoder output per position; None -> in_channels * patch_len
    max_tokens: int = 512
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.in_channels < 1 or self.patch_len < 1:
            raise ValueError("in_channels and patch_len must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.head_out_dim is None:
            self.head_out_dim = self.in_channels * self.patch_len

    @property
    def patch_dim(self):
        return self.in_channels * self.patch_len

    def token_count(self, timesteps):
        if timesteps < self.patch_len:
            raise ShapeError(
                f"window of {timesteps} timesteps shorter than patch length {self.patch_len}"
            )
        return timesteps // self.patch_len


def sinusoidal_table(n_positions, dim, dtype=np.float32):
    """Classic fixed sin/cos position table, (n_positions, dim)."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((n_positions, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : dim - dim // 2])
    return table.astype(dtype)


def truncated_normal(rng, shape, std=0.02, bound=2.0, dtype=np.float32):
    """Normal(0, std) truncated at +-bound*std via inverse-CDF sampling."""
    lo = 0.5 * (1.0 + special.erf(-bound / np.sqrt(2.0)))
    hi = 0.5 * (1.0 + special.erf(bound / np.sqrt(2.0)))
    u = rng.uniform(lo, hi, size=shape)
    return (std * np.sqrt(2.0) * special.erfinv(2.0 * u - 1.0)).astype(dtype)


def patchify(windows, patch_len):
    """(B, C, T) -> (B, K, patch_len * C), flattened time-major so that
    patch[:, i, s * C + c] == windows[:, c, i * patch_len + s]."""
    windows = np.asarray(windows)
    if windows.ndim != 3:
        raise ShapeError(f"expected (batch, channels, timesteps), got {windows.shape}")
    b, c, t = windows.shape
    if t < patch_len:
        raise ShapeError(f"timesteps {t} shorter than patch length {patch_len}")
    k = t // patch_len
    used = windows[:, :, : k * patch_len]
    # (B, C, K, S) -> (B, K, S, C) -> (B, K, S*C)
    return np.ascontiguousarray(
        used.reshape(b, c, k, patch_len).transpose(0, 2, 3, 1)
    ).reshape(b, k, patch_len * c)


def unpatchify(patches, in_channels):
    """Inverse of patchify: (B, K, S*C) -> (B, C, K*S)."""
    patches = np.asarray(patches)
    b, k, d = patches.shape
    if d % in_channels != 0:
        raise ShapeError(f"patch dim {d} not divisible by channel count {in_channels}")
    s = d // in_channels
    return np.ascontiguousarray(
        patches.reshape(b, k, s, in_channels).transpose(0, 3, 1, 2)
    ).reshape(b, in_channels, k * s)


def expected_param_count(config):
    """Closed-form trainable-array element count for one EncoderDecoder."""
    d = config.embed_dim
    h = config.mlp_ratio * d
    per_layer = 4 * d * d + 2 * d * h + 9 * d + h
    total = (config.patch_dim + 1) * d            # tokenizer
    total += d                                    # CLS
    total += config.encoder_layers * per_layer
    total += 2 * d                                # encoder final norm
    total += d                                    # mask embedding
    total += config.decoder_layers * per_layer
    total += 2 * d                                # decoder final norm
    total += (d + 1) * config.head_out_dim        # output head
    return total


class EncoderDecoder:
    """Weights and forward passes for one modality's Transformer."""

    def __init__(self, config, rng=None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        if rng is None:
            rng = np.random.default_rng(0)
        self.params = {}
        self.pos_table = sinusoidal_table(config.max_tokens, config.embed_dim, self.dtype)

        d = config.embed_dim
        self._add("tok.w", truncated_normal(rng, (config.patch_dim, d), dtype=self.dtype))
        self._add("tok.b", np.zeros(d, dtype=self.dtype))
        self._add("cls", truncated_normal(rng, (d,), dtype=self.dtype))
        for i in range(config.encoder_layers):
            self._add_block(f"enc{i}", rng)
        self._add("enc.lnf.g", np.ones(d, dtype=self.dtype))
        self._add("enc.lnf.b", np.zeros(d, dtype=self.dtype))
        self._add("dec.mask", truncated_normal(rng, (d,), dtype=self.dtype))
        for i in range(config.decoder_layers):
            self._add_block(f"dec{i}", rng)
        self._add("dec.lnf.g", np.ones(d, dtype=self.dtype))
        self._add("dec.lnf.b", np.zeros(d, dtype=self.dtype))
        self._add("head.w", truncated_normal(rng, (d, config.head_out_dim), dtype=self.dtype))
        self._add("head.b", np.zeros(config.head_out_dim, dtype=self.dtype))

    def _add(self, name, data):
        self.params[name] = Parameter(data, name=name)

    def _add_block(self, prefix, rng):
        d = self.config.embed_dim
        h = self.config.mlp_ratio * d
        self._add(f"{prefix}.ln1.g", np.ones(d, dtype=self.dtype))
        self._add(f"{prefix}.ln1.b", np.zeros(d, dtype=self.dtype))
        for w in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.{w}", truncated_normal(rng, (d, d), dtype=self.dtype))
            self._add(f"{prefix}.{w[1]}b", np.zeros(d, dtype=self.dtype))
        self._add(f"{prefix}.ln2.g", np.ones(d, dtype=self.dtype))
        self._add(f"{prefix}.ln2.b", np.zeros(d, dtype=self.dtype))
        self._add(f"{prefix}.mlp.w1", truncated_normal(rng, (d, h), dtype=self.dtype))
        self._add(f"{prefix}.mlp.b1", np.zeros(h, dtype=self.dtype))
        self._add(f"{prefix}.mlp.w2", truncated_normal(rng, (h, d), dtype=self.dtype))
        self._add(f"{prefix}.mlp.b2", np.zeros(d, dtype=self.dtype))

    # -- state management ---------------------------------------------------
    def param_count(self):
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ShapeError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = arr.copy()

    def freeze(self):
        for p in self.params.values():
            p.trainable = False
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.trainable = True
            p.requires_grad = True
        return self

    @property
    def frozen(self):
        return all(not p.trainable for p in self.params.values())

    # -- forward pieces -------------------------------------------------------
    def tokenize(self, windows):
        """(B, C, T) -> token Tensor (B, K, d)."""
        patches = patchify(windows, self.config.patch_len)
        if patches.shape[-1] != self.config.patch_dim:
            raise ShapeError(
                f"window has {patches.shape[-1] // self.config.patch_len} channels, "
                f"tokenizer expects {self.config.in_channels}"
            )
        x = Tensor(patches.astype(self.dtype, copy=False))
        return ad.matmul(x, self.params["tok.w"]) + self.params["tok.b"]

    def _attention(self, x, prefix, attn_out=None):
        cfg = self.config
        b, length, d = x.shape
        heads, hd = cfg.heads, d // cfg.heads

        def split(t):
            return ad.transpose(ad.reshape(t, (b, length, heads, hd)), (0, 2, 1, 3))

        q = split(ad.matmul(x, self.params[f"{prefix}.wq"]) + self.params[f"{prefix}.qb"])
        k = split(ad.matmul(x, self.params[f"{prefix}.wk"]) + self.params[f"{prefix}.kb"])
        v = split(ad.matmul(x, self.params[f"{prefix}.wv"]) + self.params[f"{prefix}.vb"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = ad.softmax(scores, axis=-1)
        if attn_out is not None:
            attn_out.append(attn.data.copy())
        ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        ctx = ad.reshape(ctx, (b, length, d))
        return ad.matmul(ctx, self.params[f"{prefix}.wo"]) + self.params[f"{prefix}.ob"]

    def _block(self, x, prefix, attn_out=None):
        eps = self.config.ln_eps
        normed = ad.layer_norm(x, self.params[f"{prefix}.ln1.g"],
                               self.params[f"{prefix}.ln1.b"], eps=eps)
        x = x + self._attention(normed, prefix, attn_out)
        normed = ad.layer_norm(x, self.params[f"{prefix}.ln2.g"],
                               self.params[f"{prefix}.ln2.b"], eps=eps)
        hidden = ad.gelu(ad.matmul(normed, self.params[f"{prefix}.mlp.w1"])
                         + self.params[f"{prefix}.mlp.b1"])
        return x + ad.matmul(hidden, self.params[f"{prefix}.mlp.w2"]) + self.params[f"{prefix}.mlp.b2"]

    def _positions(self, index_rows):
        """Gather the fixed table at per-window token indices: (B, L) -> (B, L, d)."""
        if index_rows.max(initial=-1) >= self.pos_table.shape[0]:
            raise ShapeError(
                f"token index {int(index_rows.max())} exceeds position table "
                f"({self.pos_table.shape[0]} rows); raise max_tokens"
            )
        return self.pos_table[index_rows]

    def encode(self, tokens, visible_idx=None, attn_out=None):
        """Run the encoder over the visible tokens of each window.

        tokens: Tensor (B, K, d). visible_idx: int array (B, V) of token
        indices (unique within each row), or None for the full sequence.
        Returns (visible token embeddings (B, V, d), CLS embedding (B, d)).
        """
        b, k, d = tokens.shape
        if visible_idx is None:
            visible_idx = np.broadcast_to(np.arange(k), (b, k))
        visible_idx = np.asarray(visible_idx)
        if visible_idx.ndim != 2 or visible_idx.shape[0] != b:
            raise ShapeError(f"visible_idx shape {visible_idx.shape} != ({b}, V)")
        if visible_idx.shape[1] == 0:
            raise ShapeError("encoder needs a nonempty visible set")
        sorted_idx = np.sort(visible_idx, axis=1)
        if visible_idx.shape[1] > k or (sorted_idx[:, 1:] == sorted_idx[:, :-1]).any():
            raise ShapeError("visible_idx must be unique token indices per window")

        if visible_idx.shape[1] == k and (visible_idx == np.arange(k)).all():
            vis = tokens  # full-sequence fast path, no gather needed
        else:
            vis = ad.gather(tokens, visible_idx[:, :, None], axis=1, unique=True)
        vis = vis + Tensor(self._positions(visible_idx))
        cls = ad.broadcast_to(ad.reshape(self.params["cls"], (1, 1, d)), (b, 1, d))
        x = ad.concat([cls, vis], axis=1)
        for i in range(self.config.encoder_layers):
            x = self._block(x, f"enc{i}", attn_out)
        x = ad.layer_norm(x, self.params["enc.lnf.g"], self.params["enc.lnf.b"],
                          eps=self.config.ln_eps)
        return x[:, 1:, :], x[:, 0, :]

    def decode(self, visible_emb, cls_emb, visible_idx, mask_idx, attn_out=None):
        """Reconstruct one output vector per token position, original order.

        The decoder sees [CLS, visible embeddings, mask embeddings], each
        non-CLS slot with its positional encoding re-added; attention is
        order-agnostic, so the sequence runs in permuted order and the head
        outputs are gathered back through the inverse permutation.

        The token count is inferred as len(visible) + len(mask); the two
        index sets must partition 0..K-1 exactly (no overlap, no gap).
        """
        b, v, d = visible_emb.shape
        visible_idx = np.asarray(visible_idx)
        mask_idx = np.asarray(mask_idx).reshape(b, -1) if np.size(mask_idx) else \
            np.empty((b, 0), dtype=visible_idx.dtype)
        m = mask_idx.shape[1]
        k = v + m
        perm = np.concatenate([visible_idx, mask_idx], axis=1)
        if (np.sort(perm, axis=1) != np.arange(k)).any():
            raise ShapeError(
                "visible_idx and mask_idx must partition token positions "
                f"0..{k - 1} with no overlap or gap"
            )

        vis = visible_emb + Tensor(self._positions(visible_idx))
        parts = [vis]
        if m:
            mask_tok = ad.broadcast_to(ad.reshape(self.params["dec.mask"], (1, 1, d)), (b, m, d))
            parts.append(mask_tok + Tensor(self._positions(mask_idx)))
        cls = ad.reshape(cls_emb, (b, 1, d))
        x = ad.concat([cls] + parts, axis=1)
        for i in range(self.config.decoder_layers):
            x = self._block(x, f"dec{i}", attn_out)
        x = ad.layer_norm(x, self.params["dec.lnf.g"], self.params["dec.lnf.b"],
                          eps=self.config.ln_eps)
        y = ad.matmul(x[:, 1:, :], self.params["head.w"]) + self.params["head.b"]
        inverse = np.argsort(perm, axis=1)
        return ad.gather(y, inverse[:, :, None], axis=1, unique=True)

    # -- whole-window embeddings ----------------------------------------------
    def cls_embedding(self, windows):
        """Full-sequence [CLS] summary, Tensor (B, d)."""
        _, cls = self.encode(self.tokenize(windows))
        return cls

    def avg_pool_embedding(self, windows):
        """Mean of the non-CLS token outputs, Tensor (B, d)."""
        tokens_out, _ = self.encode(self.tokenize(windows))
        return ad.mean(tokens_out, axis=1)

    def embedding(self, windows, mode="cls"):
        if mode == "cls":
            return self.cls_embedding(windows)
        if mode == "avgpool":
            return self.avg_pool_embedding(windows)
        raise ValueError(f"unknown embedding mode {mode!r}")
