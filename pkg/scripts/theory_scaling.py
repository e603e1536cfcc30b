"""Runtime sweeps for the decomposed EA plus the wrong-location trajectory.

Writes the CLI's trials.csv / scaling_report.json under ``--out`` and a
``wrong_count.csv`` comparing the empirical mean wrong count with the
mean-field closed form.
"""
import argparse
import sys
from pathlib import Path

from muir import cli, io
from muir.theory import expected_wrong_count, mean_wrong_trajectory

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/theory")
    ap.add_argument("--L", type=int, default=64, help="locations for the trajectory")
    ap.add_argument("--trials", type=int, default=10_000)
    ap.add_argument("--steps", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    code = cli.main(["theory", "--config", str(ROOT / "configs" / "theory.yaml"), "--out", str(out)])
    report = io.read_json(out / "scaling_report.json")
    for name, entry in report.items():
        if "fit" in entry:
            fit = entry["fit"]
            print(f"{name}: {entry['verdict']}  R^2={fit['r2']:.4f}  means={[round(m, 1) for m in fit['mean_iterations']]}")
        else:
            chk = entry["ordering"]
            print(f"{name}: {entry['verdict']}  D={chk['D']}  means={[round(m, 1) for m in chk['mean_iterations']]}")

    emp = mean_wrong_trajectory(args.L, args.trials, args.seed, args.steps)
    rows = []
    for t in range(args.steps + 1):
        w = expected_wrong_count(args.L, t)
        rows.append({"t": t, "closed_form": w, "empirical": float(emp[t]), "relative_gap": (emp[t] - w) / w})
    io.write_csv(out / "wrong_count.csv", rows)
    print(f"wrote {out / 'wrong_count.csv'}")
    return code


if __name__ == "__main__":
    sys.exit(main())
