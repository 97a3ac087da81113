"""`denc-export export --images DIR --splits FILE --backbone NAME --out FILE`.

The splits file is JSON mapping each class-folder name to "seen" or
"unseen". Exit codes: 0 success, 2 usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .export import BACKBONES, ExportError, ExportJob, export_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denc-export",
                                     description="Export CNN image features to DENCFSv1")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export an image-folder dataset")
    p.add_argument("--images", required=True, help="root folder; one subfolder per class")
    p.add_argument("--splits", required=True, help="JSON file: class name -> seen|unseen")
    p.add_argument("--backbone", choices=list(BACKBONES), default="resnet18")
    p.add_argument("--out", required=True, help="output DENCFSv1 path")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--device", default="cpu")
    p.add_argument("--weights", help="backbone+head state_dict; default seeded random init")
    p.add_argument("--seed", type=int, default=0, help="init seed when no weights are given")
    p.add_argument("--head-epochs", type=int, default=3)
    p.add_argument("--train-backbone", action="store_true")
    p.add_argument("--on-error", choices=["abort", "skip"], default="abort",
                   help="what to do with unreadable images")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        splits = json.loads(Path(args.splits).read_text())
        if not isinstance(splits, dict):
            raise ExportError("splits file must be a JSON object")
        job = ExportJob(
            image_root=args.images,
            splits=splits,
            out_path=args.out,
            backbone=args.backbone,
            batch_size=args.batch_size,
            device=args.device,
            weights=args.weights,
            init_seed=args.seed,
            head_epochs=args.head_epochs,
            train_backbone=args.train_backbone,
            on_error=args.on_error,
        )
        out = export_features(job)
    except (ExportError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
