"""Exporter command line: train a reference CNN and export its bundle."""

from __future__ import annotations

import argparse
import sys

from .train import ARCHS, ExportError, make_datasets, train_and_export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lsnm-export", description=__doc__)
    parser.add_argument("--arch", required=True, choices=sorted(ARCHS))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    parser.add_argument("--epochs", type=int, default=None)
    args = parser.parse_args(argv)
    datasets = make_datasets(args.arch, args.seed)
    try:
        bundle = train_and_export(datasets, args.arch, args.seed, args.out, args.epochs)
    except ExportError as e:
        print(f"refused: {e}", file=sys.stderr)
        return 2
    print(f"wrote {bundle.model_path}")
    print(f"wrote {bundle.fixture_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
