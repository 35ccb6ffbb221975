"""vitexport CLI: run a ViT over an image directory and emit OSTF tensors."""
from __future__ import annotations

import argparse
import sys

from .backbone import load_model
from .export import export_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitexport", description="Export ViT features and attention to OSTF files")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export every image in a directory")
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--model", required=True, help="backbone id (hub model name, or 'selftest' for the offline stub)")
    p.add_argument("--out", required=True, help="output directory for .feat/.attn files and the manifest")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        backbone = load_model(args.model)
        manifest = export_dataset(args.images, backbone, args.out)
    except Exception as exc:  # surfaced as a clean diagnostic, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"exported {len(manifest.entries)} image(s) with {manifest.model_id} "
        f"(d={manifest.dim}, heads={manifest.num_heads}, stride={manifest.patch_stride})"
    )
    for entry in manifest.skipped:
        print(f"  skipped {entry['image']}: {entry['reason']}")
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
