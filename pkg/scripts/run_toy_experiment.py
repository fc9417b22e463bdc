"""End-to-end toy experiment against frozen caption embeddings.

Builds the deterministic synthetic corpus, trains the small ViT-plus-head
image pathway with the chosen objective, and reports retrieval quality and
embedding health. Roughly a minute on one CPU core at the defaults. The same
flow is available through the CLI (synth-data / train / eval); this script
shows the library API directly.
"""

import argparse
import json
import os

import numpy as np

from capalign.cache import EmbeddingCache
from capalign.data import (
    SynthSpec,
    SyntheticImageSource,
    build_corpus,
    read_manifest_entries,
)
from capalign.evaluator import (
    AnchorSet,
    RetrievalPool,
    classify,
    embedding_row_variance,
    retrieve_top1,
)
from capalign.trainer import DatasetManifest, TrainConfig, run
from capalign.vision import ViTConfig, forward


def encode_corpus(params, source, entries, batch=64):
    chunks = []
    for start in range(0, len(entries), batch):
        images = np.stack([source.load(loc) for _, loc in entries[start : start + batch]])
        chunks.append(forward(params, images))
    return np.concatenate(chunks, axis=0)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="toy_run", help="output directory")
    parser.add_argument("--loss", choices=["contrastive", "cosine"], default="contrastive")
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--seed", type=int, default=3)
    args = parser.parse_args()

    spec = SynthSpec(n_pairs=256, n_classes=16, image_size=32, channels=3,
                     embed_dim=32, class_noise=0.7, seed=7)
    vit = ViTConfig(image_size=32, patch_size=4, channels=3, width=64, depth=2,
                    heads=4, head_dim=16, ff_width=256, embed_dim=32)
    config = TrainConfig(total_steps=args.steps, warmup_steps=max(1, args.steps // 10),
                         peak_lr=1e-3, weight_decay=0.2, batch_size=64,
                         loss_kind=args.loss, seed=args.seed)

    corpus_dir = os.path.join(args.out, "corpus")
    paths = build_corpus(corpus_dir, spec)
    entries = read_manifest_entries(paths["manifest"])
    source = SyntheticImageSource(spec)
    print(f"corpus: {spec.n_pairs} pairs, {spec.n_classes} classes -> {corpus_dir}")

    manifest = DatasetManifest(entries, source, shuffle_seed=11)
    with EmbeddingCache.open(paths["captions"]) as cache:
        state, metrics_path = run(manifest, cache, config, vit_config=vit,
                                  out_dir=args.out)
    first = float(np.mean(state.loss_history[:20]))
    last = float(np.mean(state.loss_history[-20:]))
    print(f"trained {state.step} steps ({args.loss}); "
          f"loss {first:.4f} -> {last:.4f}; metrics in {metrics_path}")

    image_embeds = encode_corpus(state.params, source, entries).astype(np.float64)
    ids = [cid for cid, _ in entries]
    with EmbeddingCache.open(paths["captions"]) as cache:
        text_embeds = cache.batch_gather(ids).astype(np.float64)
    pool = RetrievalPool(image_embeds, text_embeds, ids=ids)
    i2t = retrieve_top1(pool, "I2T")
    t2i = retrieve_top1(pool, "T2I")

    with EmbeddingCache.open(paths["anchors"]) as anchor_cache:
        labels = [f"class {k}" for k in range(spec.n_classes)]
        anchors = AnchorSet(labels, anchor_cache.batch_gather(list(range(spec.n_classes))))
    classes = []
    with open(paths["manifest"], encoding="utf-8") as f:
        for line in f:
            if line.strip():
                classes.append(int(json.loads(line)["class"]))
    hits = sum(classify(anchors, z)[0] == f"class {k}"
               for z, k in zip(image_embeds, classes))

    print(f"retrieval top-1: I2T {i2t:.3f}, T2I {t2i:.3f}")
    print(f"anchor classification: {hits}/{len(classes)} "
          f"({hits / len(classes):.3f})")
    print(f"image embedding row variance: {embedding_row_variance(image_embeds):.3e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
