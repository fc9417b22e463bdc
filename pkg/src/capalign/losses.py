"""Alignment objectives on (caption embedding, image embedding) batches.

Two objectives: the symmetric InfoNCE contrastive loss over the B x B
similarity matrix, and the positive-pair cosine loss. Both re-normalize
rows defensively, return analytic gradients w.r.t. the raw (pre-norm)
image embeddings, and never produce gradients for the text side: caption
embeddings are frozen targets from the cache.

Numerics: inputs are promoted to float64 internally; the scalar loss is
reduced with math.fsum so that permuting a batch (same permutation on text
rows, image rows, and ids) reproduces the loss to the last bit. Gradients
are returned in the dtype of the image embeddings.

Each result carries similarity_evals, the number of dot products the
objective actually evaluated: B^2 for contrastive, B for cosine. This is
the measurable face of the asymptotic cost gap between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DegenerateInputError,
    EmptyBatchError,
    NumericError,
    RangeError,
    ShapeError,
)

INIT_LOG_SCALE = math.log(1.0 / 0.07)
CLAMP_MAX = 100.0


@dataclass(frozen=True)
class Temperature:
    """Learnable inverse temperature: similarity multiplier is exp(log_scale)."""

    log_scale: float = INIT_LOG_SCALE
    learnable: bool = True
    clamp_max: float = CLAMP_MAX

    def __post_init__(self):
        if not math.isfinite(self.log_scale):
            raise RangeError(f"log_scale must be finite, got {self.log_scale}")
        # compare in the log domain so a value clamped to log(clamp_max) is
        # accepted even when exp(log(clamp_max)) rounds a hair above clamp_max
        if self.log_scale > math.log(self.clamp_max):
            raise RangeError(
                f"exp(log_scale) = {math.exp(self.log_scale):.4f} exceeds clamp {self.clamp_max}"
            )

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    def updated(self, new_log_scale: float) -> "Temperature":
        """Copy with log_scale moved and the clamp applied (exp(s) <= clamp_max)."""
        clamped = min(new_log_scale, math.log(self.clamp_max))
        return Temperature(clamped, self.learnable, self.clamp_max)


@dataclass
class AlignedBatch:
    """One optimization step's worth of paired rows. Row i of text_embeds is
    the frozen embedding of the caption paired with image i. images, when
    present, carries the raw pixel batch so the trainer can push the loss
    gradient back through the encoder."""

    text_embeds: np.ndarray
    image_embeds: np.ndarray
    ids: list
    images: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        t, z = self.text_embeds, self.image_embeds
        if t.ndim != 2 or z.ndim != 2:
            raise ShapeError(expected="rank-2 (B, D)", actual=f"{t.shape} / {z.shape}",
                             what="batch embeddings")
        if t.shape[0] == 0:
            raise EmptyBatchError("batch has zero rows")
        if t.shape != z.shape:
            raise ShapeError(expected=str(t.shape), actual=str(z.shape),
                             what="image_embeds")
        if len(self.ids) != t.shape[0]:
            raise ShapeError(expected=f"{t.shape[0]} ids", actual=f"{len(self.ids)} ids",
                             what="batch ids")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(z))):
            raise NumericError("batch embeddings contain non-finite values")
        if self.images is not None and self.images.shape[0] != t.shape[0]:
            raise ShapeError(expected=f"{t.shape[0]} images",
                             actual=f"{self.images.shape[0]} images", what="batch images")

    @property
    def size(self) -> int:
        return self.text_embeds.shape[0]


@dataclass(frozen=True)
class LossResult:
    loss: float
    image_embed_grad: np.ndarray
    log_scale_grad: Optional[float]
    similarity_evals: int


def _normalize_with_norms(m: np.ndarray, what: str):
    m64 = m.astype(np.float64)
    norms = np.linalg.norm(m64, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateInputError(f"{what} row {int(zero[0])} has zero norm")
    return m64 / norms[:, None], norms


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Rows rescaled to unit L2 norm, direction preserved."""
    if m.ndim != 2:
        raise ShapeError(expected="rank-2 matrix", actual=str(m.shape), what="matrix")
    normalized, _ = _normalize_with_norms(m, "matrix")
    return normalized.astype(m.dtype)


def _chain_through_normalization(grad_hat, z_hat, norms):
    # z_hat = z/|z|; pull the gradient back to raw z
    radial = np.einsum("ij,ij->i", grad_hat, z_hat)
    return (grad_hat - z_hat * radial[:, None]) / norms[:, None]


def _fsum(values) -> float:
    return math.fsum(values.ravel().tolist())


def _logsumexp_rows(m: np.ndarray) -> np.ndarray:
    # fsum inside each row so the value is independent of column order
    shift = m.max(axis=1)
    e = np.exp(m - shift[:, None])
    return shift + np.log([math.fsum(row) for row in e.tolist()])


def similarity_matrix(batch: AlignedBatch) -> np.ndarray:
    """Untempered cosine similarities: entry (i, j) = t_hat_i . z_hat_j."""
    t_hat, _ = _normalize_with_norms(batch.text_embeds, "text_embeds")
    z_hat, _ = _normalize_with_norms(batch.image_embeds, "image_embeds")
    return t_hat @ z_hat.T


def contrastive_loss(batch: AlignedBatch, temp: Temperature) -> LossResult:
    """Symmetric cross-entropy over the scaled similarity matrix.

    loss = -(1/2B) sum_i [log softmax_row_i(S)_ii + log softmax_col_i(S)_ii]
    with S_ij = exp(log_scale) * t_hat_i . z_hat_j. Gradients flow to the raw
    image embeddings and, when learnable, to log_scale.
    """
    b = batch.size
    t_hat, _ = _normalize_with_norms(batch.text_embeds, "text_embeds")
    z_hat, z_norms = _normalize_with_norms(batch.image_embeds, "image_embeds")
    sims = t_hat @ z_hat.T  # one evaluation per (caption, image) pair: B^2
    scale = temp.scale
    logits = scale * sims
    if not np.all(np.isfinite(logits)):
        raise NumericError("similarity logits are non-finite")

    diag = np.diag(logits)
    lse_rows = _logsumexp_rows(logits)
    lse_cols = _logsumexp_rows(logits.T)
    loss = math.fsum((lse_rows - diag).tolist() + (lse_cols - diag).tolist()) / (2 * b)

    p_rows = np.exp(logits - lse_rows[:, None])
    p_cols = np.exp(logits - lse_cols[None, :])
    dlogits = (p_rows + p_cols - 2.0 * np.eye(b)) / (2 * b)

    grad_hat = scale * (dlogits.T @ t_hat)
    grad = _chain_through_normalization(grad_hat, z_hat, z_norms)
    ls_grad = _fsum(dlogits * logits) if temp.learnable else None
    return LossResult(
        loss=float(loss),
        image_embed_grad=grad.astype(batch.image_embeds.dtype),
        log_scale_grad=ls_grad,
        similarity_evals=sims.size,
    )


def cosine_loss(batch: AlignedBatch) -> LossResult:
    """Positive pairs only: loss = (1/B) sum_i (1 - t_hat_i . z_hat_i).

    Range [0, 2]. Touches B similarities, one per pair: no in-batch negatives,
    so cost and memory stay linear in the batch size.
    """
    b = batch.size
    t_hat, _ = _normalize_with_norms(batch.text_embeds, "text_embeds")
    z_hat, z_norms = _normalize_with_norms(batch.image_embeds, "image_embeds")
    paired = np.einsum("ij,ij->i", t_hat, z_hat)  # one evaluation per pair: B
    if not np.all(np.isfinite(paired)):
        raise NumericError("paired similarities are non-finite")
    loss = math.fsum((1.0 - paired).tolist()) / b

    grad_hat = -t_hat / b
    grad = _chain_through_normalization(grad_hat, z_hat, z_norms)
    return LossResult(
        loss=float(loss),
        image_embed_grad=grad.astype(batch.image_embeds.dtype),
        log_scale_grad=None,
        similarity_evals=int(paired.size),
    )
