"""Train the ablation variants (lookup radius 0, single pyramid level, plain
conv update) next to the baseline and compare held-out EPE.

    FLOW_PROFILE=fast32 python3 scripts/run_ablations.py [--only radius0 ...]
"""
import argparse
import logging
import os

from pairflow import tensor as T
from pairflow.experiments import ABLATIONS, desk_config, evaluate_model, train_cached


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--only", nargs="+", choices=sorted(ABLATIONS), default=list(ABLATIONS))
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--iters", type=int, default=32)
    ap.add_argument("--cache", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    T.set_profile(os.environ.get("FLOW_PROFILE", "fast32"))

    rows = []
    for name in args.only:
        cfg = desk_config(args.steps, **ABLATIONS[name])
        run = train_cached(cfg, args.cache)
        m = evaluate_model(run.model, cfg, args.iters)
        rows.append((name, m["epe"], m["f1_all"], run.train_seconds / 60))
        print(f"{name:14s} EPE {m['epe']:.3f}  F1-all {m['f1_all']:5.1f}%  train {run.train_seconds / 60:.1f} min",
              flush=True)
    print("\nname            EPE     F1-all")
    for name, epe, f1, _ in rows:
        print(f"{name:14s}  {epe:.3f}  {f1:5.1f}%")


if __name__ == "__main__":
    main()
