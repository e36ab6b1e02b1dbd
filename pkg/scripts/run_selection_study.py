#!/usr/bin/env python3
"""Reproduce a model-selection frequency study from a named preset.

fig4 runs the clean-data comparison of the dendrogram criterion against
AIC/BIC/ICL; fig5 repeats it with 5% heavy-tailed contamination. Rerun the
same command to resume from the checkpoint. Outputs land under
results/<preset>/ as a results CSV, one curve file per method, and a run
manifest.
"""

import argparse
import sys
from pathlib import Path

from sgmoe.cli import run_cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="fig4", choices=("fig4", "fig5"))
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()

    base = Path(args.out_dir) / args.preset / args.preset
    base.parent.mkdir(parents=True, exist_ok=True)
    argv = ["select-study", "--preset", args.preset, "--out", str(base)]
    if args.workers is not None:
        argv += ["--workers", str(args.workers)]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    return run_cli(argv)


if __name__ == "__main__":
    sys.exit(main())
