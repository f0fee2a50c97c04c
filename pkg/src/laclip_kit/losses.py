"""Symmetric InfoNCE losses with analytic gradients and a learnable temperature.

Embeddings are row-major ``(N, d)`` float64 arrays whose rows are expected to
be unit norm; similarity is the row dot product. Gradients are taken with
respect to those (already normalized) rows and the log-inverse-temperature
``s``; the normalization Jacobian belongs to the encoder.

Losses are per-sample means, so the multi-text loss over ``M + 1`` caption
slots is the average of the per-slot CLIP losses, and collapses to the
plain CLIP loss when ``M == 0`` or when every slot holds the same texts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyTextList, ShapeMismatch, ZeroNorm

LOGIT_SCALE_MAX = 100.0
INIT_TAU = 0.07


def normalize_rows(matrix) -> np.ndarray:
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeMismatch(f"expected a non-empty 2-d matrix, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNorm(int(zero[0]))
    return x / norms[:, None]


@dataclass
class TemperatureParam:
    """Learnable temperature stored as ``s = log(1 / tau)``.

    ``clamp()`` keeps the logit scale ``exp(s)`` at or below ``exp(clamp_max)``;
    the optimizer calls it after every update.
    """

    s: float = math.log(1.0 / INIT_TAU)
    clamp_max: float = math.log(LOGIT_SCALE_MAX)

    @classmethod
    def from_tau(cls, tau: float, clamp_max: float = math.log(LOGIT_SCALE_MAX)) -> "TemperatureParam":
        return cls(math.log(1.0 / tau), clamp_max)

    @property
    def tau(self) -> float:
        return math.exp(-self.s)

    @property
    def logit_scale(self) -> float:
        return math.exp(self.s)

    def clamp(self) -> None:
        self.s = min(self.s, self.clamp_max)


@dataclass
class LossOutput:
    l_image: float
    l_text: float
    total: float
    grad_image: np.ndarray
    grad_text: np.ndarray
    grad_s: float


def _log_softmax_last(z: np.ndarray) -> np.ndarray:
    # reduce over a contiguous last axis so both directions sum in the same order
    z = np.ascontiguousarray(z)
    m = z.max(axis=-1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))


def _check_pair(img: np.ndarray, txt: np.ndarray) -> None:
    if img.ndim != 2 or txt.ndim != 2:
        raise ShapeMismatch("embeddings must be 2-d")
    if img.shape != txt.shape:
        raise ShapeMismatch(f"image batch {img.shape} vs text batch {txt.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeMismatch("empty batch")


def _slot_terms(img, txts, scale):
    """Per-slot losses and gradients w.r.t. the logits, stacked over slots.

    ``txts`` is ``(K, N, d)``. Returns ``(li, lt, d_li, d_lt, z)`` where
    ``li[j]``/``lt[j]`` are the image/text losses of slot ``j`` (per-sample
    means) and ``d_li[j]``/``d_lt[j]`` their gradients w.r.t. ``z[j]``.
    """
    n = img.shape[0]
    z = scale * np.einsum("nd,kmd->knm", img, txts)
    eye = np.eye(n)
    logp_img = _log_softmax_last(z)  # image anchor i, softmax over texts k of slot j
    logp_txt = _log_softmax_last(z.swapaxes(1, 2)).swapaxes(1, 2)  # text anchor k, over images i
    li = -np.trace(logp_img, axis1=1, axis2=2) / n
    lt = -np.trace(logp_txt, axis1=1, axis2=2) / n
    d_li = (np.exp(logp_img) - eye) / n
    d_lt = (np.exp(logp_txt) - eye) / n
    return li, lt, d_li, d_lt, z


def _backward(img, txts, scale, g_img, g_txt, z):
    """Chain per-slot logit gradients back to embeddings and ``s``."""
    g = 0.5 * (g_img + g_txt)
    grad_s = float(np.sum(g * z))
    gs = scale * g
    grad_image = np.einsum("knm,kmd->nd", gs, txts)
    grad_text = np.einsum("knm,nd->kmd", gs, img)
    return grad_image, grad_text, grad_s


def clip_loss_and_grads(img, txt, temp: TemperatureParam) -> LossOutput:
    """Symmetric image-text InfoNCE with in-batch negatives.

    ``l_image`` averages ``-log softmax_k(S_ik / tau)[i]`` over image anchors,
    ``l_text`` the same over text anchors, and ``total`` is their mean.
    Gradients are of ``total``.
    """
    img = np.asarray(img, dtype=np.float64)
    txt = np.asarray(txt, dtype=np.float64)
    _check_pair(img, txt)
    scale = math.exp(temp.s)
    li, lt, d_li, d_lt, z = _slot_terms(img, txt[None], scale)
    l_image, l_text = float(li[0]), float(lt[0])
    grad_image, grad_text, grad_s = _backward(img, txt[None], scale, d_li, d_lt, z)
    return LossOutput(l_image, l_text, (l_image + l_text) / 2, grad_image, grad_text[0], grad_s)


def multitext_loss_and_grads(img, txts, temp: TemperatureParam, image_scaling: str = "mean") -> LossOutput:
    """Multi-positive loss pairing each image with its original caption and every rewrite.

    ``txts`` holds ``M + 1`` batches; slot ``j`` row ``k`` is the ``j``-th
    caption of record ``k``. Negatives for slot ``j`` come only from slot
    ``j`` of the other records. Every one of the ``N * (M + 1)`` texts is a
    text-side anchor against all ``N`` images.

    ``image_scaling="printed"`` multiplies the image side by ``(M + 1) / M``
    (a ``1/M`` prefactor instead of ``1/(M + 1)``); it needs ``M >= 1``.
    ``grad_text`` is returned stacked as ``((M + 1) * N, d)``, slot-major.
    """
    img = np.asarray(img, dtype=np.float64)
    if len(txts) == 0:
        raise EmptyTextList("need at least the original caption batch")
    txts = [np.asarray(t, dtype=np.float64) for t in txts]
    for t in txts:
        _check_pair(img, t)
    stacked = np.stack(txts)
    k = stacked.shape[0]
    if image_scaling == "mean":
        w_img = 1.0
    elif image_scaling == "printed":
        if k < 2:
            raise ValueError("printed scaling divides by M and needs M >= 1")
        w_img = k / (k - 1)
    else:
        raise ValueError(f"unknown image_scaling {image_scaling!r}")
    scale = math.exp(temp.s)
    li, lt, d_li, d_lt, z = _slot_terms(img, stacked, scale)
    l_image = w_img * float(np.mean(li))
    l_text = float(np.mean(lt))
    grad_image, grad_text, grad_s = _backward(img, stacked, scale, (w_img / k) * d_li, d_lt / k, z)
    return LossOutput(
        l_image, l_text, (l_image + l_text) / 2, grad_image, grad_text.reshape(-1, img.shape[1]), grad_s
    )
