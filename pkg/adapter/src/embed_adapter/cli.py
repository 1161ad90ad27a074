"""Command-line front end speaking the embedding handoff protocol.

Exit codes: 0 success, 1 adapter failure (message on stderr), 2 usage.
"""

import argparse
import sys
from pathlib import Path

from .adapter import AdapterConfig, AdapterError, run_adapter


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="embed-adapter",
        description="Embed one slide's tiles into an HDF5 feature file.",
    )
    p.add_argument("--tiles-dir", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--dim", required=True, type=int)
    p.add_argument("--embedder-id", required=True)
    p.add_argument("--model", default="stub", help="registered backend name")
    p.add_argument("--device", default="cpu")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--mpp", type=float, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dim < 1:
        parser.error(f"--dim must be >= 1, got {args.dim}")
    if args.batch_size < 1:
        parser.error(f"--batch-size must be >= 1, got {args.batch_size}")
    config = AdapterConfig(
        tiles_dir=args.tiles_dir,
        manifest=args.manifest,
        out=args.out,
        dim=args.dim,
        embedder_id=args.embedder_id,
        model=args.model,
        device=args.device,
        batch_size=args.batch_size,
        mpp=args.mpp,
    )
    try:
        out = run_adapter(config)
    except AdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"adapter: wrote {out} ({args.embedder_id}, dim {args.dim})")
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
