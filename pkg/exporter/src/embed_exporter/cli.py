"""Command line: export caption or anchor embeddings into a cache file.

    embed-exporter export --captions captions.tsv --out captions.lftc
    embed-exporter export-anchors --labels labels.txt --out anchors.lftc

Captions are TSV lines of id<TAB>text; labels are one per line and become
anchor ids 0..K-1 in order.
"""

import argparse
import sys

from .errors import ExporterError


def _add_model_args(p: argparse.ArgumentParser) -> None:
    from .export import DEFAULT_MODEL

    p.add_argument("--model", default=DEFAULT_MODEL,
                   help="sentence-transformers model name or path")
    p.add_argument("--out", required=True, help="output cache path")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--dtype", choices=["float32", "bfloat16"], default="float32")
    p.add_argument("--device", help="inference device hint, e.g. cpu or cuda")


def cmd_export(args) -> int:
    from .export import ExportJob, export

    summary = export(ExportJob(out_path=args.out, captions_path=args.captions,
                               model_name=args.model, batch_size=args.batch_size,
                               device=args.device, dtype=args.dtype))
    print(f"wrote {summary['path']}: {summary['records']} records, "
          f"dim {summary['dim']}, dtype {summary['dtype']}")
    return 0


def cmd_export_anchors(args) -> int:
    from .export import ExportJob, export_anchors, read_labels

    labels = read_labels(args.labels)
    summary = export_anchors(labels, args.template,
                             ExportJob(out_path=args.out, model_name=args.model,
                                       batch_size=args.batch_size,
                                       device=args.device, dtype=args.dtype))
    print(f"wrote {summary['path']}: {summary['records']} anchors, "
          f"dim {summary['dim']}, dtype {summary['dtype']}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="embed-exporter", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="embed a captions TSV into a cache")
    p.add_argument("--captions", required=True, help="TSV of id<TAB>text")
    _add_model_args(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("export-anchors", help="embed prompted class labels")
    p.add_argument("--labels", required=True, help="text file, one label per line")
    p.add_argument("--template", default="It is a photo of {label}",
                   help="prompt with a {label} placeholder")
    _add_model_args(p)
    p.set_defaults(func=cmd_export_anchors)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ExporterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
