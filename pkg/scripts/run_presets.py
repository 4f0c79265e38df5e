"""Run every named CLI preset into results/<preset>/ and print the exit codes."""
import argparse
import os
import sys

from roughvisc.cli import PRESETS, main


def cli():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results")
    ap.add_argument("presets", nargs="*", default=sorted(PRESETS))
    args = ap.parse_args()
    worst = 0
    for name in args.presets:
        code = main(["run", "--preset", name, "--out", os.path.join(args.out, name)])
        print(f"{name}: exit {code}")
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(cli())
