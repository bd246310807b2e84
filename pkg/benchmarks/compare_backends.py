"""Compare the compiled scan kernel with the NumPy fallback.

    python3 benchmarks/compare_backends.py [--batch 8 --length 128 --d-inner 64 --n-state 16]
"""
import argparse
import json

from docmamba.bench import compare_backends
from docmamba.training import single_threaded


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--length", type=int, default=128)
    ap.add_argument("--d-inner", type=int, default=64)
    ap.add_argument("--n-state", type=int, default=16)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()
    with single_threaded():
        result = compare_backends(args.batch, args.length, args.d_inner, args.n_state, args.reps)
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
