"""Desk-scale paired data: a synthetic class-structured corpus and image sources.

The synthetic corpus gives a fully deterministic, download-free stand-in for a
captioned image dataset. K class prototypes sit on the unit sphere in the
embedding space; each pair's caption embedding is its class prototype plus a
bounded per-sample perturbation (re-normalized), and its image is a fixed
random linear projection of that embedding squashed into [-1, 1] by tanh.
Every quantity is a pure function of (spec.seed, pair_id), so corpora never
need to be shipped: they are regenerated on demand, identically.

Because the image is rendered from the pair's own caption embedding, each
image uniquely identifies its caption. An encoder therefore has enough
signal to reach perfect train-set retrieval, while distinct classes keep the
anchor/classification paths meaningful.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .cache import build_cache
from .errors import ConfigError, IngestionError

IMAGE_CONTRAST = 0.8  # pre-tanh gain; keeps pixels well inside (-1, 1)

_PROTO_STREAM = 1
_CAPTION_STREAM = 2
_PROJECTION_STREAM = 3


@dataclass(frozen=True)
class SynthSpec:
    n_pairs: int = 256
    n_classes: int = 16
    image_size: int = 32
    channels: int = 3
    embed_dim: int = 32
    class_noise: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1 or self.n_classes < 1 or self.n_classes > self.n_pairs:
            raise ConfigError(
                f"need 1 <= n_classes <= n_pairs, got {self.n_classes}/{self.n_pairs}"
            )
        for name in ("image_size", "channels", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.class_noise < 2.0:
            raise ConfigError(f"class_noise must be in [0, 2), got {self.class_noise}")


def class_of(spec: SynthSpec, pair_id: int) -> int:
    return pair_id % spec.n_classes


def prototypes(spec: SynthSpec) -> np.ndarray:
    """(n_classes, embed_dim) unit rows, deterministic in spec.seed."""
    rng = np.random.default_rng([spec.seed, _PROTO_STREAM])
    p = rng.standard_normal((spec.n_classes, spec.embed_dim))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return p.astype(np.float32)


def caption_embedding(spec: SynthSpec, pair_id: int) -> np.ndarray:
    """Unit vector near the pair's class prototype; the per-sample offset has
    norm class_noise exactly, so samples of one class share a cone whose width
    is controlled by that single knob."""
    proto = prototypes(spec)[class_of(spec, pair_id)].astype(np.float64)
    rng = np.random.default_rng([spec.seed, _CAPTION_STREAM, pair_id])
    eps = rng.standard_normal(spec.embed_dim)
    eps /= np.linalg.norm(eps)
    v = proto + spec.class_noise * eps
    return (v / np.linalg.norm(v)).astype(np.float32)


def _projection(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, _PROJECTION_STREAM])
    pixels = spec.channels * spec.image_size * spec.image_size
    return rng.standard_normal((pixels, spec.embed_dim))


def render_image(spec: SynthSpec, pair_id: int) -> np.ndarray:
    """(channels, image_size, image_size) float32 in (-1, 1)."""
    z = caption_embedding(spec, pair_id).astype(np.float64)
    flat = np.tanh(IMAGE_CONTRAST * (_projection(spec) @ z))
    shape = (spec.channels, spec.image_size, spec.image_size)
    return flat.reshape(shape).astype(np.float32)


# --- image sources ------------------------------------------------------------


class SyntheticImageSource:
    """Resolves locators of the form "synth:<pair_id>". The projection matrix
    is materialized once; renders share it."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self._proj = _projection(spec)

    def load(self, locator: str) -> np.ndarray:
        if not locator.startswith("synth:"):
            raise IngestionError(f"not a synthetic locator: {locator!r}")
        try:
            pair_id = int(locator.split(":", 1)[1])
        except ValueError as exc:
            raise IngestionError(f"bad synthetic locator: {locator!r}") from exc
        z = caption_embedding(self.spec, pair_id).astype(np.float64)
        flat = np.tanh(IMAGE_CONTRAST * (self._proj @ z))
        shape = (self.spec.channels, self.spec.image_size, self.spec.image_size)
        return flat.reshape(shape).astype(np.float32)


class DirectoryImageSource:
    """Loads RGB image files relative to a root directory and scales pixel
    values to [-1, 1]."""

    def __init__(self, root: str, image_size: int):
        self.root = root
        self.image_size = image_size

    def load(self, locator: str) -> np.ndarray:
        from PIL import Image

        path = os.path.join(self.root, locator)
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                if im.size != (self.image_size, self.image_size):
                    im = im.resize((self.image_size, self.image_size), Image.BILINEAR)
                hwc = np.asarray(im, dtype=np.float32)
        except (OSError, ValueError) as exc:
            raise IngestionError(f"cannot load image {path!r}: {exc}") from exc
        return (hwc.transpose(2, 0, 1) / 127.5) - 1.0


# --- corpus on disk -----------------------------------------------------------

CORPUS_FORMAT = "synth-corpus-v1"
CAPTIONS_FILE = "captions.lftc"
ANCHORS_FILE = "anchors.lftc"
MANIFEST_FILE = "manifest.jsonl"
META_FILE = "meta.json"


def build_corpus(out_dir: str, spec: SynthSpec) -> dict:
    """Write captions cache, class-anchor cache, manifest, and meta. Returns
    the paths. Anchor ids are 0..n_classes-1 in class order."""
    os.makedirs(out_dir, exist_ok=True)
    captions = os.path.join(out_dir, CAPTIONS_FILE)
    anchors = os.path.join(out_dir, ANCHORS_FILE)
    manifest = os.path.join(out_dir, MANIFEST_FILE)
    meta = os.path.join(out_dir, META_FILE)

    build_cache(
        captions,
        ((i, caption_embedding(spec, i)) for i in range(spec.n_pairs)),
        dim=spec.embed_dim,
        normalize=True,
    ).close()
    proto = prototypes(spec)
    build_cache(
        anchors,
        ((k, proto[k]) for k in range(spec.n_classes)),
        dim=spec.embed_dim,
        normalize=True,
    ).close()

    tmp = manifest + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for i in range(spec.n_pairs):
            row = {"caption_id": i, "image": f"synth:{i}", "class": class_of(spec, i)}
            f.write(json.dumps(row) + "\n")
    os.replace(tmp, manifest)

    tmp = meta + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump({"format": CORPUS_FORMAT, "spec": dataclasses.asdict(spec)}, f, indent=2)
        f.write("\n")
    os.replace(tmp, meta)
    return {"captions": captions, "anchors": anchors, "manifest": manifest, "meta": meta}


def load_corpus_spec(corpus_dir: str) -> SynthSpec:
    path = os.path.join(corpus_dir, META_FILE)
    try:
        with open(path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read corpus meta {path!r}: {exc}") from exc
    if meta.get("format") != CORPUS_FORMAT:
        raise IngestionError(f"unknown corpus format in {path!r}: {meta.get('format')!r}")
    return SynthSpec(**meta["spec"])


def read_manifest_entries(path: str) -> list:
    """Manifest JSONL -> list of (caption_id, locator) tuples, file order."""
    entries = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                    entries.append((int(row["caption_id"]), str(row["image"])))
                except (ValueError, KeyError) as exc:
                    raise IngestionError(f"{path}:{lineno}: bad manifest row: {exc}") from exc
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path!r}: {exc}") from exc
    return entries
