"""Batch caption embedding with pretrained sentence-transformer models.

The model is a flag: the desk-scale default is a small open model that runs
on CPU, and anything sentence-transformers can load (including multi-billion
parameter embedding models on suitable hardware) works the same way. Pooling
is whatever the chosen model's own pipeline prescribes; this package does not
re-decide it. Vectors are stored exactly as the model emits them, with the
cache's normalized flag left false, since the training losses normalize
defensively anyway.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import writer
from .errors import CaptionFileError, JobError, TemplateError

logger = logging.getLogger("embed_exporter")

DEFAULT_MODEL = "sentence-transformers/all-MiniLM-L6-v2"
DEFAULT_TEMPLATE = "It is a photo of {label}"


@dataclass(frozen=True)
class ExportJob:
    out_path: str
    captions_path: str | None = None
    model_name: str = DEFAULT_MODEL
    batch_size: int = 32
    device: str | None = None
    prompt_template: str | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise JobError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dtype not in writer.DTYPE_CODES:
            raise JobError(f"dtype must be one of {sorted(writer.DTYPE_CODES)}, "
                           f"got {self.dtype!r}")


def read_captions(path: str) -> list[tuple[int, str]]:
    """Parse a TSV of id<TAB>text lines. Text may itself contain tabs; only
    the first tab splits. Blank lines are skipped. Ids must be unique
    non-negative integers."""
    records: list[tuple[int, str]] = []
    seen: set[int] = set()
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as exc:
        raise CaptionFileError(f"cannot read captions file: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        record_id, sep, text = line.partition("\t")
        if not sep:
            raise CaptionFileError(f"{path}:{lineno}: expected id<TAB>text")
        try:
            cid = int(record_id)
        except ValueError:
            raise CaptionFileError(
                f"{path}:{lineno}: id must be an integer, got {record_id!r}") from None
        if cid < 0:
            raise CaptionFileError(f"{path}:{lineno}: id must be non-negative")
        if cid in seen:
            raise CaptionFileError(f"{path}:{lineno}: duplicate id {cid}")
        seen.add(cid)
        records.append((cid, text))
    if not records:
        raise CaptionFileError(f"{path}: no caption records")
    return records


def read_labels(path: str) -> list[str]:
    """One label per line; blank lines skipped; order defines anchor ids."""
    try:
        labels = [ln.strip() for ln in open(path, encoding="utf-8") if ln.strip()]
    except OSError as exc:
        raise CaptionFileError(f"cannot read labels file: {exc}") from exc
    if not labels:
        raise CaptionFileError(f"{path}: no labels")
    return labels


def load_model(name: str, device: str | None = None):
    # imported lazily so format-only users never pay the torch import
    from sentence_transformers import SentenceTransformer

    try:
        return SentenceTransformer(name, device=device)
    except Exception as exc:
        raise JobError(f"cannot load embedding model {name!r}: {exc}") from exc


def model_dim(model) -> int:
    getter = getattr(model, "get_embedding_dimension", None)
    if getter is None:
        getter = model.get_sentence_embedding_dimension
    return int(getter())


def _warn_truncations(model, ids, texts) -> None:
    limit = getattr(model, "max_seq_length", None)
    tokenizer = getattr(model, "tokenizer", None)
    if not limit or tokenizer is None:
        return
    for cid, text in zip(ids, texts):
        n_tokens = len(tokenizer(text, truncation=False)["input_ids"])
        if n_tokens > limit:
            logger.warning(
                "caption id %d: %d tokens exceeds the model limit %d, truncating",
                cid, n_tokens, limit)


def embed_texts(model, texts: list[str], batch_size: int) -> np.ndarray:
    vecs = model.encode(list(texts), batch_size=batch_size,
                        convert_to_numpy=True, show_progress_bar=False)
    return np.asarray(vecs, dtype=np.float32)


def _export_texts(job: ExportJob, ids, texts, model=None) -> dict:
    if model is None:
        model = load_model(job.model_name, job.device)
    _warn_truncations(model, ids, texts)
    vecs = embed_texts(model, texts, job.batch_size)
    dim = model_dim(model)
    if vecs.shape != (len(texts), dim):
        raise JobError(f"model emitted shape {vecs.shape}, "
                       f"expected ({len(texts)}, {dim})")
    writer.write_cache(job.out_path, ids, vecs, dtype=job.dtype, normalized=False)
    return {"path": job.out_path, "records": len(texts), "dim": dim,
            "dtype": job.dtype, "model": job.model_name}


def export(job: ExportJob, model=None) -> dict:
    """Embed every caption in job.captions_path into job.out_path."""
    if job.captions_path is None:
        raise JobError("export needs captions_path")
    records = read_captions(job.captions_path)
    ids = [cid for cid, _ in records]
    texts = [text for _, text in records]
    return _export_texts(job, ids, texts, model=model)


def export_anchors(labels: list[str], template: str, job: ExportJob, model=None) -> dict:
    """Embed template.format(label=...) per label; anchor ids are 0..K-1 in
    label order, which is the id contract classification consumers rely on."""
    if "{label}" not in template:
        raise TemplateError(f"template must contain '{{label}}', got {template!r}")
    if not labels:
        raise TemplateError("need at least one label")
    job = replace(job, prompt_template=template)
    texts = [template.format(label=label) for label in labels]
    return _export_texts(job, list(range(len(labels))), texts, model=model)
