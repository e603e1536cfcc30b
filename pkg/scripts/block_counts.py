"""Block counts and parameter accounting for the built-in architectures."""
import argparse
import sys

from muir.architectures import BUILTIN
from muir.bank import BankConfig, parsimony_threshold
from muir.decomposition import decompose_architecture


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--m", type=int, default=16)
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--c", type=int, default=4)
    args = ap.parse_args()
    cfg = BankConfig(c=args.c, m=args.m, n=args.n)
    print(f"{'architecture':<18} {'L':>6} {'body params':>12} {'K below which smaller':>22}")
    for name, make in BUILTIN.items():
        layers = make()
        L = len(decompose_architecture(layers, args.m, args.n))
        body = sum(spec.param_count() for spec in layers[1:-1])
        print(f"{name:<18} {L:>6} {body:>12} {parsimony_threshold(L, cfg):>22.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
