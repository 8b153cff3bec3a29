"""Compare warm-started and zero-initialised inference on synthetic sequences.

    FLOW_PROFILE=fast32 python3 scripts/warm_start_demo.py [--iters 1 2 4 8 16]
"""
import argparse
import os

from pairflow import tensor as T
from pairflow.experiments import desk_config, train_cached, warm_start_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    ap.add_argument("--sequences", type=int, default=4)
    ap.add_argument("--cache", default=None)
    args = ap.parse_args()
    T.set_profile(os.environ.get("FLOW_PROFILE", "fast32"))
    run = train_cached(desk_config(), args.cache)
    print("iters  warm EPE  zero-init EPE")
    for it in args.iters:
        r = warm_start_comparison(run.model, n_sequences=args.sequences, iters=it)
        print(f"{it:5d}  {r['warm']:8.3f}  {r['cold']:13.3f}", flush=True)


if __name__ == "__main__":
    main()
