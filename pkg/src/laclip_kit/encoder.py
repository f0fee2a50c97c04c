"""Hash tokenizer and minimal trainable encoders with hand-derived gradients.

The text encoder mean-pools the non-pad token embeddings, projects, and
l2-normalizes; the image encoder is a linear projection of precomputed
features followed by l2 normalization. Both return a backward map from the
gradient at the normalized embedding to parameter gradients.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeMismatch, ZeroNorm
from .hashing import hash64
from .losses import TemperatureParam

VOCAB_SIZE = 49408
CONTEXT_LEN = 77
PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3

_WORD = re.compile(r"\w+")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def token_id(word: str, vocab_size: int = VOCAB_SIZE) -> int:
    return N_SPECIAL + hash64(word) % (vocab_size - N_SPECIAL)


def tokenize(text: str, vocab_size: int = VOCAB_SIZE, context_len: int = CONTEXT_LEN) -> np.ndarray:
    """Fixed-length token ids: ``[bos, w1, ..., wk, eos, pad, ...]``.

    Words beyond ``context_len - 2`` are dropped so ``eos`` always fits.
    """
    if vocab_size <= N_SPECIAL:
        raise ValueError("vocab_size must exceed the 3 special ids")
    if context_len < 2:
        raise ValueError("context_len must fit bos and eos")
    body = [token_id(w, vocab_size) for w in words(text)[: context_len - 2]]
    ids = np.full(context_len, PAD, dtype=np.int64)
    ids[0] = BOS
    ids[1:1 + len(body)] = body
    ids[1 + len(body)] = EOS
    return ids


def tokenize_batch(texts, vocab_size: int = VOCAB_SIZE, context_len: int = CONTEXT_LEN) -> np.ndarray:
    if not texts:
        return np.zeros((0, context_len), dtype=np.int64)
    return np.stack([tokenize(t, vocab_size, context_len) for t in texts])


@dataclass
class EncoderParams:
    token_embedding: np.ndarray  # (vocab, d_e)
    text_proj: np.ndarray  # (d_e, d)
    image_proj: np.ndarray  # (D_in, d)
    temp: TemperatureParam

    TENSORS = ("token_embedding", "text_proj", "image_proj")

    @classmethod
    def init(cls, vocab_size: int, text_width: int, image_dim: int, embed_dim: int,
             rng: np.random.Generator, temp: TemperatureParam | None = None,
             token_init_std: float = 0.02) -> "EncoderParams":
        return cls(
            token_embedding=token_init_std * rng.standard_normal((vocab_size, text_width)),
            text_proj=rng.standard_normal((text_width, embed_dim)) / np.sqrt(text_width),
            image_proj=rng.standard_normal((image_dim, embed_dim)) / np.sqrt(image_dim),
            temp=temp if temp is not None else TemperatureParam(),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TENSORS}

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.token_embedding.copy(), self.text_proj.copy(), self.image_proj.copy(),
            TemperatureParam(self.temp.s, self.temp.clamp_max),
        )


def _normalize_with_backward(h: np.ndarray):
    r = np.linalg.norm(h, axis=1, keepdims=True)
    zero = np.flatnonzero(r[:, 0] == 0)
    if zero.size:
        raise ZeroNorm(int(zero[0]))
    y = h / r

    def backward(g_y: np.ndarray) -> np.ndarray:
        # d(h/|h|) = (I - y y^T) / |h|
        return (g_y - y * np.sum(g_y * y, axis=1, keepdims=True)) / r

    return y, backward


def encode_text(params: EncoderParams, tokens: np.ndarray) -> tuple[np.ndarray, Callable]:
    """Embed ``(n, L)`` token ids; returns unit rows and a backward map.

    ``backward(grad_embedding)`` returns ``{"token_embedding", "text_proj"}``
    gradients (the token-embedding gradient is dense).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeMismatch(f"expected (n, context_len) token ids, got {tokens.shape}")
    if tokens.size and tokens.max() >= params.token_embedding.shape[0]:
        raise ShapeMismatch("token id outside vocabulary")
    mask = tokens != PAD
    counts = mask.sum(axis=1, keepdims=True).astype(np.float64)
    emb = params.token_embedding[tokens] * mask[..., None]
    pooled = emb.sum(axis=1) / counts
    h = pooled @ params.text_proj
    y, norm_backward = _normalize_with_backward(h)

    def backward(g_y: np.ndarray) -> dict[str, np.ndarray]:
        g_h = norm_backward(g_y)
        g_proj = pooled.T @ g_h
        g_pooled = (g_h @ params.text_proj.T) / counts
        g_emb = np.zeros_like(params.token_embedding)
        rows, cols = np.nonzero(mask)
        np.add.at(g_emb, tokens[rows, cols], g_pooled[rows])
        return {"token_embedding": g_emb, "text_proj": g_proj}

    return y, backward


def encode_image(params: EncoderParams, features: np.ndarray) -> tuple[np.ndarray, Callable]:
    """Project ``(n, D_in)`` features and normalize; backward gives ``{"image_proj"}``."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.image_proj.shape[0]:
        raise ShapeMismatch(f"expected (n, {params.image_proj.shape[0]}) features, got {x.shape}")
    y, norm_backward = _normalize_with_backward(x @ params.image_proj)

    def backward(g_y: np.ndarray) -> dict[str, np.ndarray]:
        return {"image_proj": x.T @ norm_backward(g_y)}

    return y, backward


def aug_image(features: np.ndarray, rng: np.random.Generator, sigma: float = 0.05,
              dropout_p: float = 0.1) -> np.ndarray:
    """Feature-space stand-in for crop augmentation: Gaussian jitter, then coordinate dropout."""
    if sigma < 0 or not 0 <= dropout_p < 1:
        raise ValueError("need sigma >= 0 and dropout_p in [0, 1)")
    x = np.asarray(features, dtype=np.float64)
    noisy = x + sigma * rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= dropout_p
    return noisy * keep
