"""Command-line entry point: render figures from sweep outputs.

    sedlab-plots --records out/records.csv --fits out/fits.json \
                 --out-dir figures [--kind rate|eta|dmin|all]

Writes ``rate.svg``, ``eta.svg``, ``dmin.svg`` (or the one kind asked
for) into the output directory, sequentially.  Exit code 0 on success,
1 on any input error (message on stderr names the offending file and,
for schema mismatches, the column or fit entry).
"""

from __future__ import annotations

import argparse
import json
import sys

from .figures import FigureKind, FigureSpec, SchemaError, render


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="sedlab-plots",
        description="Render rate/envelope figures from records.csv and fits.json.",
    )
    parser.add_argument("--records", required=True,
                        help="records.csv written by a sweep")
    parser.add_argument("--fits", required=True,
                        help="fits.json written alongside the records")
    parser.add_argument("--out-dir", required=True,
                        help="directory receiving the SVG files")
    parser.add_argument("--kind", default="all",
                        choices=[k.value for k in FigureKind] + ["all"],
                        help="which figure to render (default: all)")
    parser.add_argument("--no-fit-text", action="store_true",
                        help="omit the fitted-constant annotations")
    parser.add_argument("--no-legend", action="store_true",
                        help="omit the per-run legends")
    args = parser.parse_args(argv)

    kinds = list(FigureKind) if args.kind == "all" else [FigureKind(args.kind)]
    try:
        for kind in kinds:
            spec = FigureSpec(
                records=args.records,
                fits=args.fits,
                kind=kind,
                output=f"{args.out_dir}/{kind.value}.svg",
                annotate_fit=not args.no_fit_text,
                legend=not args.no_legend,
            )
            print(f"wrote {render(spec)}")
    except (SchemaError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
