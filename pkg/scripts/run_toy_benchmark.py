"""Run the standard toy benchmark end to end through the CLI.

For each seed: train a victim, then run the sublayer sweep, the purifier
ablation, the depth sweep and the MI scan against it. A final ``report`` run
gathers every per-seed run directory.

    python3 scripts/run_toy_benchmark.py --out runs/toy --seeds 0 1 2
"""

import argparse
import os
import sys
from pathlib import Path

from revertlab.cli import EXIT_OK, main as cli


def run(argv):
    print("revertlab", " ".join(argv), flush=True)
    code = cli(argv)
    if code != EXIT_OK:
        sys.exit(code)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--config", default=None)
    p.add_argument("--skip", nargs="*", default=[], help="recipes to skip")
    args = p.parse_args()

    base = ["--config", args.config] if args.config else []
    runs = []
    for seed in args.seeds:
        root = args.out / f"seed{seed}"
        run(["train-victim", "--seed", str(seed), "--out", str(root / "victim")] + base)
        os.environ["REVERTLAB_VICTIM"] = str(root / "victim" / "victim.ckpt")
        for recipe in ("sublayer-sweep", "purifier-ablation", "depth-sweep", "mi-scan"):
            if recipe in args.skip:
                continue
            run([recipe, "--seed", str(seed), "--out", str(root / recipe)] + base)
            runs.append(str(root / recipe))
    run(["report", "--out", str(args.out / "report"), "--from"] + runs)


if __name__ == "__main__":
    main()
