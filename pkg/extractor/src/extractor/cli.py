import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ExtractorError
from .images import extract_images, list_classes
from .jobs import ExtractJob
from .prompts import extract_prompts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlm-extract",
        description="Export image datasets and prompt texts to .tfe/.tfp files.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_img = sub.add_parser("images", help="folder of class subdirs -> .tfe")
    p_img.add_argument("--dataset", required=True)
    p_img.add_argument("--split", default="")
    p_img.add_argument("--name", default="", help="dataset name for the sidecar")
    p_img.add_argument("--encoder", default="clip:openai/clip-vit-base-patch16")
    p_img.add_argument("--batch-size", type=int, default=64)
    p_img.add_argument("--out", required=True)

    p_txt = sub.add_parser("prompts", help="prompt list -> .tfp")
    p_txt.add_argument("--classes", required=True,
                       help="dataset root (class dirs) or a .meta.json sidecar")
    p_txt.add_argument("--prompt-list",
                       help="TSV file: class_index<TAB>m<TAB>text; omit for "
                            "hand-crafted-only (M=0)")
    p_txt.add_argument("--llm-endpoint", default="",
                       help="optional completion endpoint for generated prompts")
    p_txt.add_argument("--dataset-description", default="")
    p_txt.add_argument("--m", type=int, default=0,
                       help="generated augmentations per class")
    p_txt.add_argument("--name", default="")
    p_txt.add_argument("--encoder", default="clip:openai/clip-vit-base-patch16")
    p_txt.add_argument("--batch-size", type=int, default=64)
    p_txt.add_argument("--out", required=True)
    return parser


def _class_names(source: str) -> list:
    path = Path(source)
    if path.is_file():
        return json.loads(path.read_text())["classes"]
    return list_classes(path)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        if args.command == "images":
            job = ExtractJob(dataset_path=Path(args.dataset),
                             output_path=Path(args.out),
                             dataset_name=args.name, split=args.split,
                             encoder=args.encoder, batch_size=args.batch_size)
            out = extract_images(job)
        else:
            names = _class_names(args.classes)
            job = ExtractJob(dataset_path=Path(args.classes),
                             output_path=Path(args.out),
                             dataset_name=args.name, encoder=args.encoder,
                             batch_size=args.batch_size,
                             prompt_list=Path(args.prompt_list)
                             if args.prompt_list else None,
                             llm_endpoint=args.llm_endpoint,
                             dataset_description=args.dataset_description,
                             prompts_per_class=args.m)
            out = extract_prompts(job, names)
    except (ExtractorError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
