"""Zero-shot evaluation protocols: prompt-anchor classification, cross-modal
top-1 retrieval, binary caption pick, and the pairwise-similarity probe.

Every decision is made on cosine similarity of L2-normalized vectors, so all
of them are invariant to positive rescaling of any input. Ties break toward
the lowest index, everywhere, and the binary pick reports ties explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInputError,
    EmptyPoolError,
    InsufficientDataError,
    ShapeError,
)
from .losses import l2_normalize_rows

PROBE_BINS = 20


@dataclass
class AnchorSet:
    """Class anchors: one prompted-caption embedding per label."""

    labels: list
    anchor_embeds: np.ndarray
    prompt_template: str = "It is a photo of {label}"

    def __post_init__(self):
        if len(self.labels) < 2:
            raise InsufficientDataError("anchor set needs at least 2 labels")
        if self.anchor_embeds.ndim != 2 or self.anchor_embeds.shape[0] != len(self.labels):
            raise ShapeError(
                expected=f"({len(self.labels)}, D)",
                actual=str(self.anchor_embeds.shape),
                what="anchor_embeds",
            )


@dataclass
class RetrievalPool:
    """Paired embeddings for retrieval; row i of each matrix is one pair."""

    image_embeds: np.ndarray
    text_embeds: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.image_embeds.ndim != 2 or self.image_embeds.shape != self.text_embeds.shape:
            raise ShapeError(
                expected=str(self.image_embeds.shape),
                actual=str(self.text_embeds.shape),
                what="pool embeddings",
            )
        if self.image_embeds.shape[0] == 0:
            raise EmptyPoolError("retrieval pool is empty")
        if not self.ids:
            self.ids = list(range(self.image_embeds.shape[0]))

    @property
    def size(self) -> int:
        return self.image_embeds.shape[0]


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateInputError(f"{what} has zero norm")
    return v / n


def classify(anchors: AnchorSet, image_embed: np.ndarray):
    """(label, scores): cosine scores against every anchor, argmax label,
    ties broken by lowest index."""
    q = _unit(image_embed, "image_embed")
    a = l2_normalize_rows(np.asarray(anchors.anchor_embeds, dtype=np.float64))
    if a.shape[1] != q.shape[0]:
        raise ShapeError(expected=f"dim {a.shape[1]}", actual=f"dim {q.shape[0]}",
                         what="image_embed")
    scores = a @ q
    best = int(np.argmax(scores))  # argmax returns the first maximum
    return anchors.labels[best], scores


def retrieve_top1(pool: RetrievalPool, direction: str) -> float:
    """Fraction of queries whose own partner ranks first by cosine similarity.

    direction "I2T": each image queries all captions; "T2I": the reverse.
    Ties break toward the lowest candidate index, so a tie with an earlier
    row counts as a miss for a later query.
    """
    if direction not in ("I2T", "T2I"):
        raise ValueError(f"direction must be 'I2T' or 'T2I', got {direction!r}")
    img = l2_normalize_rows(pool.image_embeds.astype(np.float64))
    txt = l2_normalize_rows(pool.text_embeds.astype(np.float64))
    sims = img @ txt.T if direction == "I2T" else txt @ img.T
    top = np.argmax(sims, axis=1)
    hits = top == np.arange(pool.size)
    return float(np.mean(hits))


def pick_caption(image_embed, caption_a, caption_b):
    """Choose the caption with the higher cosine similarity to the image.

    Returns (choice, tied) where choice is "A" or "B"; an exact tie returns
    ("A", True).
    """
    q = _unit(image_embed, "image_embed")
    a = _unit(caption_a, "caption_a")
    b = _unit(caption_b, "caption_b")
    sim_a = float(q @ a)
    sim_b = float(q @ b)
    if sim_a == sim_b:
        return "A", True
    return ("A", False) if sim_a > sim_b else ("B", False)


def pairwise_similarity_probe(embeds: np.ndarray):
    """Mean cosine similarity over all unordered distinct row pairs, plus a
    20-bin histogram of those similarities over [-1, 1].

    A high mean says the embeddings crowd a narrow cone; the histogram shows
    the shape of that crowding.
    """
    if embeds.ndim != 2:
        raise ShapeError(expected="rank-2 (M, D)", actual=str(embeds.shape), what="embeds")
    m = embeds.shape[0]
    if m < 2:
        raise InsufficientDataError(f"probe needs at least 2 rows, got {m}")
    unit = l2_normalize_rows(embeds.astype(np.float64))
    sims = unit @ unit.T
    iu = np.triu_indices(m, k=1)
    pair_sims = np.clip(sims[iu], -1.0, 1.0)
    mean = float(np.mean(pair_sims))
    hist, _ = np.histogram(pair_sims, bins=PROBE_BINS, range=(-1.0, 1.0))
    return mean, hist


def embedding_row_variance(embeds: np.ndarray) -> float:
    """Mean per-dimension variance across normalized rows. Zero means every
    row points the same way (the collapse failure mode); healthy encoders
    keep this well above zero."""
    unit = l2_normalize_rows(embeds.astype(np.float64))
    return float(np.var(unit, axis=0).mean())
