"""Command line front end: one figure per invocation.

Exit codes: 0 success, 1 usage error, 2 input/schema error (the message
names the missing column or file).
"""

from __future__ import annotations

import argparse
import sys

from medshock_figures import __version__
from medshock_figures.render import FIGURE_KINDS, FigureSpec, SchemaError, render


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"medshock-figures: error[usage]: {message}", file=sys.stderr)
        self.print_usage(sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="medshock-figures", description=__doc__)
    parser.add_argument("--version", action="version", version=f"medshock-figures {__version__}")
    parser.add_argument("--kind", choices=FIGURE_KINDS, required=True)
    parser.add_argument("--in", dest="inputs", nargs="+", required=True, help="result file(s) to plot")
    parser.add_argument("--out", required=True, help="output image (.svg or .png)")
    parser.add_argument("--term", default="", help="term to plot for forest / dose-response figures")
    parser.add_argument("--title", default="")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        result = render(FigureSpec(kind=args.kind, inputs=args.inputs, output=args.out, title=args.title, term=args.term))
    except SchemaError as exc:
        print(f"medshock-figures: error[data]: {exc}", file=sys.stderr)
        return 2
    print(f"{args.kind}: {len(result.data)} plotted rows -> {result.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
