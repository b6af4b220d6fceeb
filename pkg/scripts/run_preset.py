"""Generate the dataset (once), run a preset grid, then compare and report.

    python scripts/run_preset.py fig3 --out results/fig3 --replicates 3
"""
import argparse
import sys
from pathlib import Path

from ssl_lab import cli


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("preset", choices=sorted(cli.PRESETS))
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--data", type=Path, default=Path("out/gen-data"))
    ap.add_argument("--replicates", type=int, default=3)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    out = args.out or Path("results") / args.preset

    if not (args.data / "manifest.csv").exists():
        code = cli.main(["gen-data", "--out", str(args.data), "--seed", str(args.seed)])
        if code:
            return code
    code = cli.main(["grid", "--preset", args.preset, "--data", str(args.data), "--out", str(out),
                     "--replicates", str(args.replicates), "--jobs", str(args.jobs), "--seed", str(args.seed)])
    # a partially failed grid still gets a report for what finished
    cli.main(["report", str(out), "--out", str(out / "report")])
    return code


if __name__ == "__main__":
    sys.exit(main())
