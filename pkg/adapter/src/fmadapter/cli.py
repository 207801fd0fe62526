"""Command line entry points: fmadapter supports | proposals | embed.

Subcommand and flag naming mirror the engine CLI, as do the exit codes:
0 success, 2 usage, 3 I/O or missing runtime, 4 malformed manifest,
5 inputs that disagree with each other.
"""

from __future__ import annotations

import argparse
import sys
from collections import Counter

from protodetect import write_embedding_archive, write_proposal_archive

from . import __version__
from .backends import BackendUnavailableError, make_embedder, make_mask_generator
from .export import (
    ConsistencyError,
    ManifestError,
    embed_proposals,
    generate_proposals,
    prepare_supports,
    read_retained,
    read_scene_manifest,
    read_support_manifest,
)
from .preprocess import TARGET_EDGE

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_DATA = 5


def _echo_config(args: argparse.Namespace) -> None:
    pairs = sorted((k, v) for k, v in vars(args).items() if k != "func")
    print("config: " + " ".join(f"{k}={v}" for k, v in pairs), file=sys.stderr)


def _cmd_supports(args: argparse.Namespace) -> int:
    entries = read_support_manifest(args.manifest)
    embedder = make_embedder(args.embedder)
    archive = prepare_supports(entries, embedder, target=args.size)
    write_embedding_archive(archive, args.out)
    per_class = Counter(entry.class_id for entry in entries)
    for class_id in sorted(per_class):
        print(f"class {class_id}: {per_class[class_id]} supports embedded")
    print(f"wrote {len(entries)} embeddings (dim {embedder.dimension}) to {args.out}")
    return EXIT_OK


def _cmd_proposals(args: argparse.Namespace) -> int:
    scenes = read_scene_manifest(args.manifest)
    generator = make_mask_generator(args.generator)
    records = generate_proposals(scenes, generator)
    write_proposal_archive(records, args.out)
    per_image = Counter((r.scene_id, r.image_id) for r in records)
    for scene in scenes:
        count = per_image.get((scene.scene_id, scene.image_id), 0)
        print(f"scene {scene.scene_id} image {scene.image_id}: {count} proposals")
    print(f"total: {len(records)} proposals over {len(scenes)} images")
    return EXIT_OK


def _cmd_embed(args: argparse.Namespace) -> int:
    scenes = read_scene_manifest(args.manifest)
    retained = read_retained(args.retained)
    generator = make_mask_generator(args.generator)
    embedder = make_embedder(args.embedder)
    archive = embed_proposals(scenes, retained, generator, embedder, target=args.size)
    write_embedding_archive(archive, args.out)
    print(f"wrote {len(archive.keys)} embeddings (dim {embedder.dimension}) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmadapter",
        description="Generate masks and crop embeddings as detection-engine archives.",
    )
    parser.add_argument("--version", action="version", version=f"fmadapter {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    supports = sub.add_parser("supports", help="embed masked support crops")
    supports.add_argument("--manifest", required=True, help="JSON array of {class_id, image, mask}")
    supports.add_argument("--out", required=True, help="embedding archive to write")
    supports.add_argument("--embedder", default="grid:8", help="embedder spec (default grid:8)")
    supports.add_argument("--size", type=int, default=TARGET_EDGE, help="crop canvas edge")
    supports.set_defaults(func=_cmd_supports)

    proposals = sub.add_parser("proposals", help="generate mask proposals for scenes")
    proposals.add_argument("--manifest", required=True, help="JSON array of {scene_id, image_id, image}")
    proposals.add_argument("--out", required=True, help="proposal records file to write")
    proposals.add_argument("--generator", default="otsu", help="mask generator spec (default otsu)")
    proposals.set_defaults(func=_cmd_proposals)

    embed = sub.add_parser("embed", help="embed retained proposal crops")
    embed.add_argument("--manifest", required=True, help="JSON array of {scene_id, image_id, image}")
    embed.add_argument("--retained", required=True, help="engine filter-proposals output")
    embed.add_argument("--out", required=True, help="embedding archive to write")
    embed.add_argument("--generator", default="otsu", help="mask generator spec (default otsu)")
    embed.add_argument("--embedder", default="grid:8", help="embedder spec (default grid:8)")
    embed.add_argument("--size", type=int, default=TARGET_EDGE, help="crop canvas edge")
    embed.set_defaults(func=_cmd_embed)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _echo_config(args)
    try:
        return args.func(args)
    except BackendUnavailableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ConsistencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
