"""Train the desk-scale model and report held-out EPE at several update counts.

    FLOW_PROFILE=fast32 python3 scripts/train_desk.py [--steps 2000] [--cache runs/cache]
"""
import argparse
import json
import logging
import os

from pairflow import tensor as T
from pairflow.config import parse_value
from pairflow.experiments import desk_config, evaluate_model, held_out, train_cached, update_magnitudes


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--cache", default=None, help="run cache directory (default runs/cache)")
    ap.add_argument("--iters", type=int, nargs="+", default=[1, 4, 12, 32, 200])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    T.set_profile(os.environ.get("FLOW_PROFILE", "fast32"))

    overrides = {k: parse_value(v) for k, v in (kv.split("=", 1) for kv in args.set)}
    cfg = desk_config(args.steps, **overrides)
    run = train_cached(cfg, args.cache)
    print(f"run directory: {run.path} ({'cached' if run.cached else 'trained'}, "
          f"{run.train_seconds / 60:.1f} min)")
    results = {it: evaluate_model(run.model, cfg, it) for it in args.iters}
    for it, m in results.items():
        print(f"iters {it:4d}  EPE {m['epe']:.3f}  F1-all {m['f1_all']:.1f}%")
    mags = update_magnitudes(run.model, held_out(cfg, 8), max(args.iters))
    print("mean |delta f| at 1/8 res, steps 1,2,4,8,...:",
          " ".join(f"{mags[k - 1]:.2e}" for k in (1, 2, 4, 8, 16, 32, 64, 128, 200) if k <= len(mags)))
    (run.path / "eval.json").write_text(json.dumps({str(k): v for k, v in results.items()}, indent=2))


if __name__ == "__main__":
    main()
