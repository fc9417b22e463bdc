"""Command line surface: build-cache, synth-data, train, eval, probe, flops.

Each command is deterministic given its inputs and seed, writes its outputs
atomically (temp file, then rename), and exits 0 only when every requested
artifact was written and validated. Commands that take a config file emit the
fully resolved configuration into their output directory so a run can always
be reproduced from its artifacts alone.

Caption record files for build-cache come in two shapes, detected from the
first data line: JSONL objects {"id": <int>, "vector": [<float>, ...]} for
hand-authored inputs, or TSV lines "<id>\t<base64 of little-endian float32>"
for bulk export.
"""

from __future__ import annotations

import argparse
import base64
import csv
import dataclasses
import io
import itertools
import json
import os
import sys
import tempfile

import numpy as np
import yaml

from . import trainer
from .cache import (
    EmbeddingCache,
    bfloat16_decode,
    bfloat16_encode,
    build_cache,
    validate_cache,
)
from .costmodel import mean_reduction, reference_comparison
from .data import (
    CAPTIONS_FILE,
    MANIFEST_FILE,
    DirectoryImageSource,
    SynthSpec,
    SyntheticImageSource,
    build_corpus,
    load_corpus_spec,
    read_manifest_entries,
)
from .errors import CapalignError, ConfigError, CorruptCacheError, IngestionError
from .evaluator import (
    AnchorSet,
    RetrievalPool,
    classify,
    embedding_row_variance,
    pairwise_similarity_probe,
    retrieve_top1,
)
from .trainer import DatasetManifest, TrainConfig, load_checkpoint
from .vision import ViTConfig, forward

ANCHORS_FILE = "anchors.lftc"

_EVAL_ENCODE_BATCH = 64


def _write_text_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _load_yaml(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"config {path!r} must be a mapping at the top level")
    return loaded


# --- build-cache -----------------------------------------------------------------


def _iter_records(path: str):
    """Yield (id, float64 vector) from a JSONL or TSV records file. The format
    is locked from the first data line; errors carry the offending line number."""
    fmt = None
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read records file {path!r}: {exc}") from exc
    with handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            if fmt is None:
                fmt = "jsonl" if line.startswith("{") else "tsv"
            try:
                if fmt == "jsonl":
                    row = json.loads(line)
                    vec = np.asarray(row["vector"], dtype=np.float64)
                    record_id = int(row["id"])
                else:
                    ident, payload = line.split("\t")
                    raw_bytes = base64.b64decode(payload, validate=True)
                    vec = np.frombuffer(raw_bytes, dtype="<f4").astype(np.float64)
                    record_id = int(ident)
                if vec.ndim != 1 or vec.size == 0:
                    raise ValueError(f"vector must be a non-empty 1-d list, got shape {vec.shape}")
            except (ValueError, KeyError, TypeError) as exc:
                raise IngestionError(f"{path}:{lineno}: bad record: {exc}") from exc
            yield record_id, vec


def _verify_cache_against_records(cache_path: str, records_path: str) -> int:
    """Second pass: every input record must decode from the cache to exactly
    the value the chosen dtype preserves."""
    count = 0
    with EmbeddingCache.open(cache_path) as cache:
        bf16 = cache.header.dtype_name == "bfloat16"
        for record_id, vec in _iter_records(records_path):
            expected = vec.astype(np.float32)
            if bf16:
                expected = bfloat16_decode(bfloat16_encode(expected))
            got = cache.lookup(record_id)
            if not np.array_equal(got, expected):
                raise CorruptCacheError(
                    f"verification mismatch for id {record_id}: cache does not "
                    f"round-trip the input vector"
                )
            count += 1
    if count == 0:
        raise CorruptCacheError("verification pass saw no records")
    return count


def cmd_build_cache(args) -> int:
    records = _iter_records(args.input)
    try:
        first = next(records)
    except StopIteration:
        raise IngestionError(f"records file {args.input!r} has no records") from None
    dim = int(first[1].size)
    cache = build_cache(
        args.out,
        itertools.chain([first], records),
        dim=dim,
        dtype=args.dtype,
        normalize=False,
    )
    header = cache.header
    cache.close()
    print(f"wrote {args.out}: {header.record_count} records, dim {header.dim}, "
          f"dtype {header.dtype_name}")
    if args.verify:
        n = _verify_cache_against_records(args.out, args.input)
        validate_cache(args.out, deep=True)
        print(f"verified {n} records against the input")
    return 0


# --- synth-data ------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    overrides = _load_yaml(args.config) if args.config else {}
    unknown = set(overrides) - {f.name for f in dataclasses.fields(SynthSpec)}
    if unknown:
        raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
    if args.seed is not None:
        overrides["seed"] = args.seed
    spec = SynthSpec(**overrides)
    paths = build_corpus(args.out, spec)
    resolved = {"command": "synth-data", "spec": dataclasses.asdict(spec), "out": args.out}
    _write_text_atomic(os.path.join(args.out, "resolved_config.yaml"),
                       yaml.safe_dump(resolved, sort_keys=True))
    validate_cache(paths["captions"], deep=True)
    validate_cache(paths["anchors"], deep=True)
    print(f"wrote corpus to {args.out}: {spec.n_pairs} pairs, "
          f"{spec.n_classes} classes, dim {spec.embed_dim}")
    return 0


# --- train -----------------------------------------------------------------------


def _resolve_data_section(cfg: dict, cache_override):
    data = cfg.get("data")
    if not isinstance(data, dict):
        raise ConfigError("config needs a 'data' mapping")
    if "corpus_dir" in data:
        corpus = data["corpus_dir"]
        spec = load_corpus_spec(corpus)
        cache_path = os.path.join(corpus, CAPTIONS_FILE)
        manifest_path = os.path.join(corpus, MANIFEST_FILE)
        source = SyntheticImageSource(spec)
        source_desc = {"kind": "synthetic", "corpus_dir": corpus}
    else:
        for key in ("cache", "manifest", "image_root", "image_size"):
            if key not in data:
                raise ConfigError(f"data section needs {key!r} when corpus_dir is absent")
        cache_path = data["cache"]
        manifest_path = data["manifest"]
        source = DirectoryImageSource(data["image_root"], int(data["image_size"]))
        source_desc = {"kind": "directory", "image_root": data["image_root"],
                       "image_size": int(data["image_size"])}
    if cache_override:
        cache_path = cache_override
    if not os.path.exists(cache_path):
        raise ConfigError(f"cache file not found: {cache_path!r}")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"manifest file not found: {manifest_path!r}")
    return cache_path, manifest_path, source, source_desc


def cmd_train(args) -> int:
    cfg = _load_yaml(args.config)
    for section in ("vit", "train"):
        if not isinstance(cfg.get(section), dict):
            raise ConfigError(f"config needs a {section!r} mapping")
    try:
        vit_config = ViTConfig(**cfg["vit"])
    except TypeError as exc:
        raise ConfigError(f"bad vit section: {exc}") from exc

    train_kwargs = dict(cfg["train"])
    if args.loss:
        train_kwargs["loss_kind"] = args.loss
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    try:
        train_config = TrainConfig(**train_kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from exc

    cache_path, manifest_path, source, source_desc = _resolve_data_section(cfg, args.cache)
    shuffle_seed = int(cfg.get("shuffle_seed", 0))
    entries = read_manifest_entries(manifest_path)
    manifest = DatasetManifest(entries, source, shuffle_seed=shuffle_seed)

    os.makedirs(args.out, exist_ok=True)
    resolved = {
        "command": "train",
        "vit": dataclasses.asdict(vit_config),
        "train": dataclasses.asdict(train_config),
        "data": {"cache": cache_path, "manifest": manifest_path, "source": source_desc},
        "shuffle_seed": shuffle_seed,
        "out": args.out,
        "resume_from": args.checkpoint,
    }
    _write_text_atomic(os.path.join(args.out, "resolved_config.yaml"),
                       yaml.safe_dump(resolved, sort_keys=True))

    with EmbeddingCache.open(cache_path) as cache:
        state, metrics_path = trainer.run(
            manifest, cache, train_config,
            vit_config=vit_config, out_dir=args.out, resume_from=args.checkpoint,
        )
    last = state.loss_history[-1] if state.loss_history else float("nan")
    print(f"trained to step {state.step}; last loss {last:.6g}; metrics at {metrics_path}")
    return 0


# --- eval ------------------------------------------------------------------------


def _encode_corpus_images(params, source, entries):
    embeds = []
    for start in range(0, len(entries), _EVAL_ENCODE_BATCH):
        chunk = entries[start : start + _EVAL_ENCODE_BATCH]
        images = np.stack([source.load(loc) for _, loc in chunk])
        embeds.append(forward(params, images))
    return np.concatenate(embeds, axis=0)


def _manifest_classes(manifest_path: str):
    classes = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "class" not in row:
                return None
            classes.append(int(row["class"]))
    return classes


def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint!r}")
    state, _, _ = load_checkpoint(args.checkpoint)
    spec = load_corpus_spec(args.corpus_dir)
    manifest_path = os.path.join(args.corpus_dir, MANIFEST_FILE)
    entries = read_manifest_entries(manifest_path)
    source = SyntheticImageSource(spec)
    cache_path = args.cache or os.path.join(args.corpus_dir, CAPTIONS_FILE)
    if not os.path.exists(cache_path):
        raise ConfigError(f"cache file not found: {cache_path!r}")

    image_embeds = _encode_corpus_images(state.params, source, entries)
    ids = [cid for cid, _ in entries]
    with EmbeddingCache.open(cache_path) as cache:
        text_embeds = cache.batch_gather(ids)

    pool = RetrievalPool(image_embeds.astype(np.float64),
                         text_embeds.astype(np.float64), ids=ids)
    report = {
        "checkpoint": args.checkpoint,
        "corpus": args.corpus_dir,
        "step": state.step,
        "pool_size": pool.size,
        "i2t_top1": retrieve_top1(pool, "I2T"),
        "t2i_top1": retrieve_top1(pool, "T2I"),
        "image_row_variance": embedding_row_variance(image_embeds.astype(np.float64)),
    }

    anchors_path = os.path.join(args.corpus_dir, ANCHORS_FILE)
    classes = _manifest_classes(manifest_path)
    if os.path.exists(anchors_path) and classes is not None:
        with EmbeddingCache.open(anchors_path) as anchors_cache:
            anchor_ids = anchors_cache.ids().tolist()
            anchor_embeds = anchors_cache.batch_gather(anchor_ids)
        anchors = AnchorSet([str(k) for k in anchor_ids], anchor_embeds.astype(np.float64))
        hits = sum(
            1 for i, embed in enumerate(image_embeds)
            if classify(anchors, embed.astype(np.float64))[0] == str(classes[i])
        )
        report["anchor_accuracy"] = hits / len(entries)

    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "eval_report.json")
    _write_text_atomic(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"I2T top-1 {report['i2t_top1']:.4f}, T2I top-1 {report['t2i_top1']:.4f} "
          f"over {report['pool_size']} pairs; report at {report_path}")
    return 0


# --- probe -----------------------------------------------------------------------


def cmd_probe(args) -> int:
    if not os.path.exists(args.cache):
        raise ConfigError(f"cache file not found: {args.cache!r}")
    with EmbeddingCache.open(args.cache) as cache:
        ids = cache.ids().tolist()
        matrix = cache.batch_gather(ids)
    mean, hist = pairwise_similarity_probe(matrix.astype(np.float64))
    report = {
        "cache": args.cache,
        "n_rows": len(ids),
        "n_pairs": len(ids) * (len(ids) - 1) // 2,
        "mean_pairwise_cosine": mean,
        "histogram_bins": len(hist),
        "histogram_range": [-1.0, 1.0],
        "histogram": hist.tolist(),
    }
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "probe_report.json")
    _write_text_atomic(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"mean pairwise cosine {mean:.4f} over {report['n_pairs']} pairs; "
          f"report at {report_path}")
    return 0


# --- flops -----------------------------------------------------------------------


def _flops_rows():
    rows = reference_comparison()
    return [
        {
            "model": r["model"],
            "n_ctx": r["n_ctx"],
            "joint_gflops": round(r["joint_gflops"], 2),
            "frozen_gflops": round(r["frozen_gflops"], 2),
            "reduction_pct": round(100.0 * r["reduction"], 2),
        }
        for r in rows
    ]


def cmd_flops(args) -> int:
    rows = _flops_rows()
    header = f"{'model':<10}{'n_ctx':>6}{'joint':>10}{'frozen':>10}{'saved':>8}"
    print(header)
    for r in rows:
        print(f"{r['model']:<10}{r['n_ctx']:>6}{r['joint_gflops']:>10.2f}"
              f"{r['frozen_gflops']:>10.2f}{r['reduction_pct']:>7.1f}%")
    print(f"mean reduction: {100.0 * mean_reduction(77):.1f}% at 77 tokens, "
          f"{100.0 * mean_reduction(128):.1f}% at 128 tokens")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        buf = io.StringIO()
        writer = csv.DictWriter(
            buf, fieldnames=["model", "n_ctx", "joint_gflops", "frozen_gflops",
                             "reduction_pct"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        csv_path = os.path.join(args.out, "flops.csv")
        _write_text_atomic(csv_path, buf.getvalue())
        print(f"table written to {csv_path}")
    return 0


# --- entry point -----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capalign",
        description="Train and evaluate an image encoder against frozen caption embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-cache", help="pack a records file into an embedding cache")
    p.add_argument("input", help="JSONL or TSV records file")
    p.add_argument("--out", required=True, help="output cache path")
    p.add_argument("--dtype", choices=["float32", "bfloat16"], default="float32")
    p.add_argument("--verify", action="store_true",
                   help="re-read the cache and compare every record to the input")
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("synth-data", help="generate the deterministic synthetic corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--config", help="YAML file with synthetic corpus fields")
    p.add_argument("--seed", type=int, help="override the corpus seed")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="run the training loop from a YAML config")
    p.add_argument("--config", required=True, help="YAML config (vit/train/data sections)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cache", help="override the caption cache path")
    p.add_argument("--loss", choices=["contrastive", "cosine"], help="override loss kind")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval and classification report for a checkpoint")
    p.add_argument("corpus_dir", help="corpus directory (synth-data output)")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--cache", help="caption cache (default: the corpus captions)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="pairwise similarity probe over a cache")
    p.add_argument("--cache", required=True, help="embedding cache to probe")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("flops", help="analytic joint-vs-frozen training cost table")
    p.add_argument("--out", help="also write flops.csv into this directory")
    p.set_defaults(func=cmd_flops)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CapalignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
