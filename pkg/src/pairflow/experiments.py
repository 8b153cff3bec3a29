"""Desk-scale experiments shared by the acceptance suite and ``scripts/``.

Training runs are deterministic given their config, so finished runs are
cached on disk under a hash of the resolved config text (and the numeric
profile). Delete the cache directory to force retraining.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig, format_kv, set_key
from .model import FlowModel
from .training import checkpoint as ckpt_io
from .training.data import make_sequence
from .training.loss import evaluate
from .training.trainer import model_from_checkpoint, train, validate, validation_set
from .update import warm_start

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(os.environ.get("PAIRFLOW_CACHE", Path.cwd() / "runs" / "cache"))

# Peak learning rate for the desk runs. The default 4e-4 showed no progress
# within the first few hundred steps at this batch size; 1e-3 does.
DESK_LR = 1e-3

ABLATIONS = {
    "baseline": {},
    "radius0": {"model.lookup.radius": 0},
    "single_level": {"model.lookup.levels": 1},
    "plain_conv": {"model.update.gru_kind": "plain_conv_stack"},
}


def desk_config(steps: int = 2000, **overrides) -> TrainConfig:
    """Tied-weight model: D=64, hidden 64, r=4, L=4, 12 updates, convex upsampling,
    trained on 64x64 smooth-field samples; validated on constant translations."""
    cfg = TrainConfig()
    cfg.optim.steps = steps
    cfg.optim.lr = DESK_LR
    cfg.data.motion_kind = "smooth_random_field"
    cfg.data.max_flow = 8.0
    for k, v in overrides.items():
        set_key(cfg, k, v)
    cfg.validate()
    return cfg


def config_hash(cfg: TrainConfig) -> str:
    text = format_kv(cfg) + f"profile = {T.get_profile()!r}\n"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Run:
    model: FlowModel
    config: TrainConfig
    path: Path
    cached: bool
    train_seconds: float


def train_cached(cfg: TrainConfig, cache_dir: str | Path | None = None, log_every: int = 100) -> Run:
    """Train ``cfg`` once; later calls with the same config load the result."""
    root = Path(cache_dir) if cache_dir is not None else DEFAULT_CACHE
    d = root / config_hash(cfg)
    ck, info = d / "model.ckpt", d / "run.json"
    if ck.is_file() and info.is_file():
        meta = json.loads(info.read_text())
        model = model_from_checkpoint(ckpt_io.load(ck), cfg.model)
        return Run(model, cfg, d, True, meta["train_seconds"])
    d.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = train(cfg, out_dir=d, log_every=log_every)
    secs = time.perf_counter() - t0
    (d / "config.kv").write_text(format_kv(cfg))
    info.write_text(json.dumps({"train_seconds": secs, "profile": T.get_profile(),
                                "notes": sorted(res.model.notes)}) + "\n")
    return Run(res.model, cfg, d, False, secs)


def held_out(cfg: TrainConfig, n: int = 32):
    """Constant translations with |f| <= max_flow, from seeds the training stream never draws."""
    return validation_set(cfg, n, kind="constant_translation")


def evaluate_model(model: FlowModel, cfg: TrainConfig, iters: int, n: int = 32) -> dict:
    return validate(model, held_out(cfg, n), iters)


def update_magnitudes(model: FlowModel, batch, iters: int) -> np.ndarray:
    """Mean per-pixel ||delta f_k|| at 1/8 resolution for k = 1..iters."""
    i1, i2 = batch[0], batch[1]
    with T.no_grad():
        out = model.forward(i1, i2, iters=iters, train=False)
    prev = np.zeros_like(out.steps[0].flow.data)
    mags = []
    for s in out.steps:
        mags.append(float(np.mean(np.hypot(*np.moveaxis(s.flow.data - prev, 1, 0)))))
        prev = s.flow.data
    return np.array(mags)


def sequence_epe(model: FlowModel, frames: list[np.ndarray], flows: list[np.ndarray], iters: int,
                 warm: bool) -> float:
    """Mean EPE over consecutive pairs, optionally chaining the warm start."""
    init = None
    epes = []
    for a, b, gt in zip(frames[:-1], frames[1:], flows):
        with T.no_grad():
            out = model.forward(a[None], b[None], iters=iters, flow_init=init)
        epes.append(evaluate(out.predictions[-1].data, gt[None])["epe"])
        init = warm_start(out.steps[-1].flow.data) if warm else None
    return float(np.mean(epes))


def warm_start_comparison(model: FlowModel, n_sequences: int = 4, n_frames: int = 10, size: int = 64,
                          iters: int = 8, seed: int = 50_000) -> dict:
    warm, cold = [], []
    for s in range(n_sequences):
        frames, flows = make_sequence(seed + s, size, size, n_frames)
        warm.append(sequence_epe(model, frames, flows, iters, True))
        cold.append(sequence_epe(model, frames, flows, iters, False))
    return {"warm": float(np.mean(warm)), "cold": float(np.mean(cold)),
            "per_sequence_warm": warm, "per_sequence_cold": cold}
