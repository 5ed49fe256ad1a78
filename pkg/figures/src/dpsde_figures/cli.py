"""render_figures <results.csv> --kind <kind> --out <image>."""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureSpec, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="render_figures")
    parser.add_argument("csv", help="harness results.csv")
    parser.add_argument("--kind", choices=KINDS, required=True)
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--dpi", type=int, default=120)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        points = render(FigureSpec(args.kind, args.csv, args.out, dpi=args.dpi))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    checks = points.get("checks", {})
    if checks:
        print(f"checks: {checks}")
    print(f"wrote {args.out} and {args.out}.points.json")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
