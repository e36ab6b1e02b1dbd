#!/usr/bin/env python3
"""Reproduce a loss-vs-sample-size study from a named preset.

The full presets are sized for a workstation (thousands of EM fits); pass
--workers to parallelize and rerun the same command to resume from the
checkpoint if interrupted. Outputs land under results/<preset>/ as a results
CSV, gnuplot curve file(s), and a run manifest.
"""

import argparse
import sys
from pathlib import Path

from sgmoe.cli import run_cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="fig3a",
                    choices=("fig3a", "fig3b", "fig3c"))
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()

    base = Path(args.out_dir) / args.preset / args.preset
    base.parent.mkdir(parents=True, exist_ok=True)
    argv = ["rate-study", "--preset", args.preset, "--out", str(base)]
    if args.workers is not None:
        argv += ["--workers", str(args.workers)]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    return run_cli(argv)


if __name__ == "__main__":
    sys.exit(main())
