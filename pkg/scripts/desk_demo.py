"""End-to-end desk demo: reference run vs broadcast run, quality + accounting.

Usage: python scripts/desk_demo.py [--out runs/demo] [--preset opensora-pab246]
"""

import argparse
import json
from pathlib import Path

from pab_engine.cli import main as cli_main


def run(argv):
    print("$ pab-engine " + " ".join(argv))
    rc = cli_main(argv)
    if rc != 0:
        raise SystemExit(rc)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/demo")
    parser.add_argument("--preset", default="opensora-pab246")
    parser.add_argument("--seed", type=int, default=11)
    args = parser.parse_args()

    out = Path(args.out)
    ref_dir = out / "reference"
    pab_dir = out / args.preset

    run(["generate", "--preset", "none", "--seed", str(args.seed), "--out", str(ref_dir)])
    run(["generate", "--preset", args.preset, "--seed", str(args.seed), "--out", str(pab_dir)])
    run(["compare", str(pab_dir), str(ref_dir), "--out", str(out)])
    run(["profile", "--preset", args.preset, "--seed", str(args.seed), "--out", str(out / "profile")])
    run([
        "simulate-parallel", "--preset", args.preset, "--out", str(out / "comm"),
        "--workers", "8", "--method", "all",
    ])
    run(["ablate", "--preset", args.preset, "--seed", str(args.seed), "--out", str(out / "ablate")])

    summary = json.loads((out / "comm" / "summary.json").read_text())
    print(
        f"\ndone: artifacts in {out} "
        f"(temporal computing fraction {summary['computing_fraction']:.4f})"
    )


if __name__ == "__main__":
    main()
