"""Command-line entry point: ``pairflow {train,infer,eval,viz,selftest}``.

Exit codes: 0 success, 1 a property/self-test failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, flatten, load_train_config
from .io import FlowFileError, read_flo, read_image, write_flo, write_flow_png
from .tensor import DimensionError

log = logging.getLogger("pairflow")


class UsageError(Exception):
    """Bad arguments or unreadable inputs; reported with exit code 2."""


# --------------------------------------------------------------------------
# manifest


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, argv: list[str], config: dict | None = None,
                   provenance: dict | None = None, seed: int | None = None,
                   outputs: list[Path] | None = None, notes: list[str] | None = None) -> dict:
    """Record everything needed to rerun a command next to its outputs."""
    manifest = {
        "command": command,
        "argv": argv,
        "profile": T.get_profile(),
        "seed": seed,
        "git": git_describe(),
        "config": None if config is None else {
            k: {"value": _jsonable(v), "source": (provenance or {}).get(k, "default")}
            for k, v in config.items()},
        "outputs": {str(p.name): sha256(p) for p in outputs or [] if p.exists()},
        "notes": sorted(notes or []),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _config_from_manifest(path: Path):
    data = json.loads(path.read_text())
    if data.get("command") != "train" or not data.get("config"):
        raise UsageError(f"{path}: not a training manifest")
    overrides = {k: (tuple(e["value"]) if isinstance(e["value"], list) else e["value"])
                 for k, e in data["config"].items()}
    prov = {k: e["source"] for k, e in data["config"].items()}
    cfg, _ = load_train_config(None, overrides)
    return cfg, prov, data.get("profile")


# --------------------------------------------------------------------------
# helpers


def _need(path: str | None) -> Path:
    if path is None:
        raise UsageError("missing required path")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


def _parse_set(items: list[str]) -> dict[str, object]:
    from .config import parse_value
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def _load_model(path: str):
    from .training.checkpoint import CheckpointError
    from .training.trainer import load_model
    p = _need(path)
    try:
        return load_model(p)
    except (CheckpointError, ConfigError) as exc:
        raise UsageError(f"incompatible checkpoint {p}: {exc}") from exc


def _read_images(paths: list[str]) -> list[np.ndarray]:
    imgs = []
    for p in paths:
        try:
            imgs.append(read_image(_need(p)))
        except UsageError:
            raise
        except OSError as exc:
            raise UsageError(f"cannot read image {p}: {exc}") from exc
    shapes = {im.shape for im in imgs}
    if len(shapes) > 1:
        raise UsageError("image extents differ: " + ", ".join(
            f"{p} {im.shape[2]}x{im.shape[1]}" for p, im in zip(paths, imgs)))
    return imgs


def _coarse_init(model, flow_full: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Full-resolution flow -> warm-started 1/8 flow on the model's padded grid."""
    from .update import downsample_flow, warm_start
    H, W = shape
    if flow_full.shape[1:] != (H, W):
        raise UsageError(f"warm-start flow is {flow_full.shape[2]}x{flow_full.shape[1]}, images are {W}x{H}")
    _, pad = model.pad_images(np.zeros((1, 3, H, W)))
    padded = np.pad(flow_full, ((0, 0), pad[:2], pad[2:]), mode="edge")
    return warm_start(downsample_flow(padded))[None]


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .training.trainer import train
    if args.manifest:
        cfg, prov, profile = _config_from_manifest(_need(args.manifest))
        if profile and profile != T.get_profile():
            log.warning("manifest was recorded under profile %s; running under %s", profile, T.get_profile())
    else:
        cfg, prov = load_train_config(_need(args.config) if args.config else None, _parse_set(args.set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, out_dir=out, log_every=args.log_every)
    last = res.history[-1] if res.history else {}
    write_manifest(out / "manifest.json", "train", args.argv, flatten(cfg), prov, cfg.optim.seed,
                   [out / "model.ckpt", out / "metrics.csv"], sorted(res.model.notes))
    if last:
        print(json.dumps({k: last[k] for k in ("step", "loss", "epe", "f1_all")}))
    return 0


def cmd_infer(args) -> int:
    from .training.loss import evaluate
    if len(args.images) < 2:
        raise UsageError("infer needs at least two images")
    model = _load_model(args.checkpoint)
    imgs = _read_images(args.images)
    H, W = imgs[0].shape[1:]
    flow_init = None
    if args.warm_start:
        try:
            flow_init = _coarse_init(model, read_flo(_need(args.warm_start)), (H, W))
        except FlowFileError as exc:
            raise UsageError(str(exc)) from exc
    out = Path(args.out)
    sequence = len(imgs) > 2
    if sequence:
        out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(len(imgs) - 1):
        with T.no_grad():
            res = model.forward(imgs[i][None], imgs[i + 1][None], iters=args.iters, flow_init=flow_init,
                                upsample=args.upsample)
        flow = res.predictions[-1].data[0]
        target = out / f"flow_{i:04d}.flo" if sequence else out
        write_flo(target, flow)
        written.append(target)
        if args.png:
            png = (out / f"flow_{i:04d}.png") if sequence else Path(args.png)
            write_flow_png(png, flow, args.viz_max)
            written.append(png)
        if args.gt and i == 0:
            gt = read_flo(_need(args.gt))
            print(json.dumps(evaluate(flow[None], gt[None])))
        if sequence and not args.no_chain:
            # the next pair starts from the forward-projected coarse estimate
            from .update import warm_start
            flow_init = warm_start(res.steps[-1].flow.data)
        else:
            flow_init = None
    manifest = (out / "manifest.json") if sequence else out.with_suffix(out.suffix + ".manifest.json")
    write_manifest(manifest, "infer", args.argv, outputs=written, notes=sorted(model.notes))
    return 0


def cmd_eval(args) -> int:
    from .training.loss import evaluate
    try:
        pred, gt = read_flo(_need(args.flow)), read_flo(_need(args.gt))
    except FlowFileError as exc:
        raise UsageError(str(exc)) from exc
    if pred.shape != gt.shape:
        raise UsageError(f"flow {pred.shape[1:]} and ground truth {gt.shape[1:]} differ in extent")
    metrics = evaluate(pred[None], gt[None])
    text = json.dumps(metrics)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_viz(args) -> int:
    try:
        flow = read_flo(_need(args.flow))
    except FlowFileError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out) if args.out else Path(args.flow).with_suffix(".png")
    write_flow_png(out, flow, args.viz_max)
    print(out)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run
    return 0 if run() else 1


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pairflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on synthetic data")
    t.add_argument("config", nargs="?", help="key = value config file")
    t.add_argument("--out", default="runs/train", help="output directory")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--manifest", help="rerun the resolved config recorded in a manifest.json")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="estimate flow between consecutive images")
    i.add_argument("images", nargs="+", help="two images, or a frame sequence")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--iters", type=int, default=None, help="refinement steps (default: config)")
    i.add_argument("--warm-start", help="full-resolution .flo of the previous pair")
    i.add_argument("--upsample", choices=("convex", "bilinear"), default=None)
    i.add_argument("--out", default="flow.flo", help=".flo path (directory for sequences)")
    i.add_argument("--png", help="also write a colour rendering (sequences: any value enables)")
    i.add_argument("--viz-max", type=float, default=None)
    i.add_argument("--gt", help="ground-truth .flo for the first pair; prints metrics")
    i.add_argument("--no-chain", action="store_true", help="sequences: start every pair from zero")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="metrics of a flow file against ground truth")
    e.add_argument("flow")
    e.add_argument("gt")
    e.add_argument("--out", help="also write the JSON here")
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("viz", help="render a .flo file with the flow colour wheel")
    v.add_argument("flow")
    v.add_argument("--out")
    v.add_argument("--viz-max", type=float, default=None,
                   help="magnitude mapped to full saturation (default: 99th percentile)")
    v.set_defaults(fn=cmd_viz)

    s = sub.add_parser("selftest", help="run the kernel/oracle invariant suite")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:           # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        T.set_profile(os.environ.get("FLOW_PROFILE", T.get_profile()))
    except ValueError as exc:
        print(f"error: FLOW_PROFILE: {exc}", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: config key {exc.key}: {exc}", file=sys.stderr)
        return 2
    except (UsageError, DimensionError, FlowFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
