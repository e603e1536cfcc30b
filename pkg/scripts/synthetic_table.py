"""Synthetic benchmark table: test RMSE (mean +- stderr) per setup, clean and noisy.

    python3 scripts/synthetic_table.py --out runs/synthetic_table
    python3 scripts/synthetic_table.py --seeds 0,1 --set muir.n_gen=20    # quick look
"""
import argparse
import sys
from pathlib import Path

from muir import cli, io

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/synthetic_table")
    ap.add_argument("--seeds", help="comma-separated seeds (default: the configs' ten)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    rows = {}
    for variant in ("clean", "noisy"):
        out = Path(args.out) / variant
        argv = ["synthetic", "--config", str(ROOT / "configs" / f"synthetic_{variant}.yaml"), "--out", str(out)]
        if args.seeds:
            argv += ["--seeds", args.seeds]
        for item in args.set:
            argv += ["--set", item]
        code = cli.main(argv)
        if code:
            print(f"{variant} run failed (exit {code}); see {out}/manifest.json", file=sys.stderr)
            return code
        rows[variant] = io.read_json(out / "results.json")["setups"]

    print(f"{'setup':<8} {'clean':>18} {'noisy':>18}")
    for setup in ("stl", "random", "oracle", "muir"):
        cells = []
        for variant in ("clean", "noisy"):
            ms = rows[variant].get(setup, {}).get("test_rmse")
            cells.append("-" if not ms or not ms["n"] else f"{ms['mean']:.3f} +- {ms['stderr']:.3f}")
        print(f"{setup:<8} {cells[0]:>18} {cells[1]:>18}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
