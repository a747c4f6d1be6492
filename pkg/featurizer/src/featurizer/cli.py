"""Batch entry point: one subdirectory of images per patient."""

import argparse
import json
import sys
from pathlib import Path

from featurizer.adapter import FeaturizeError, FeaturizeJob, extract_tokens

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".webp")


def _collect(root: Path) -> dict[str, list]:
    patients = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in sub.iterdir()
                       if f.suffix.lower() in IMAGE_SUFFIXES)
        if files:
            patients[sub.name] = files
    return patients


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="featurize",
        description="embed patient image directories as token bag files")
    parser.add_argument("--images", required=True,
                        help="root directory with one subdirectory per patient")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--model", required=True,
                        help="frozen encoder (hub id or local directory)")
    parser.add_argument("--labels", help="JSON file mapping patient id to class index")
    args = parser.parse_args(argv)

    root = Path(args.images)
    if not root.is_dir():
        print(f"not a directory: {root}", file=sys.stderr)
        return 1
    labels = json.loads(Path(args.labels).read_text()) if args.labels else {}
    patients = _collect(root)
    if not patients:
        print(f"no patient image directories under {root}", file=sys.stderr)
        return 1

    try:
        doc = extract_tokens(FeaturizeJob(patients=patients, out_dir=Path(args.out),
                                          model=args.model, labels=labels))
    except (FeaturizeError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1

    meta = doc["featurizer"]
    print(f"wrote {len(doc['patients'])} bag(s) to {args.out}")
    for warning in meta["warnings"]:
        print(f"warning: {warning['patient']}: {warning['message']}", file=sys.stderr)
    for error in meta["errors"]:
        print(f"error: {error['patient']}: {error['message']}", file=sys.stderr)
    return 0 if not meta["errors"] else 1


if __name__ == "__main__":
    sys.exit(main())
