"""Training loop, validation and model <-> checkpoint conversion."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensor as T
from ..config import ModelConfig, TrainConfig, format_kv, model_config_from_kv
from ..model import FlowModel
from ..tensor import Tensor
from . import checkpoint as ckpt_io
from .augment import augment
from .checkpoint import Checkpoint, CheckpointError
from .data import make_synthetic, sample_seed, stack_samples
from .loss import evaluate, sequence_loss
from .optim import AdamW, clip_gradients, one_cycle_lr

log = logging.getLogger(__name__)

CSV_FIELDS = ("step", "loss", "epe", "f1_all", "lr")

Batch = tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, snapshot: Checkpoint):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass
class TrainResult:
    model: FlowModel
    optimizer: AdamW
    history: list[dict] = field(default_factory=list)
    checkpoint: Checkpoint | None = None


# --------------------------------------------------------------------------
# checkpoints


def model_to_checkpoint(model: FlowModel, config_text: str | None = None, step: int = 0,
                        optimizer: AdamW | None = None, rng_state: dict | None = None) -> Checkpoint:
    tensors = {f"param/{k}": p.data for k, p in model.params.items()}
    dt = next(iter(model.params.values())).data.dtype
    tensors.update({f"buffer/{k}": v.astype(dt) for k, v in model.buffers.items()})
    if optimizer is not None:
        tensors.update({f"optim/m/{k}": v for k, v in optimizer.m.items()})
        tensors.update({f"optim/v/{k}": v for k, v in optimizer.v.items()})
    if config_text is None:
        config_text = format_kv(TrainConfig(model=model.config))
    return Checkpoint(tensors, config_text, step, rng_state or {})


def model_from_checkpoint(ck: Checkpoint, config: ModelConfig | None = None) -> FlowModel:
    """Rebuild a model; parameter names and shapes must match the config."""
    cfg = config or model_config_from_kv(ck.config_text)
    model = FlowModel.init(cfg)
    params, buffers = ck.group("param/"), ck.group("buffer/")
    missing = sorted(set(model.params) - set(params))
    extra = sorted(set(params) - set(model.params))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match config: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, p in model.params.items():
        if params[k].shape != p.shape:
            raise CheckpointError(f"{k}: checkpoint shape {params[k].shape} != model shape {p.shape}")
        model.params[k] = Tensor(params[k], requires_grad=True)
    for k in model.buffers:
        if k in buffers:
            model.buffers[k] = buffers[k].astype(np.float64)
    return model


def load_model(path: str | Path) -> FlowModel:
    return model_from_checkpoint(ckpt_io.load(path))


# --------------------------------------------------------------------------
# data


def synthetic_stream(cfg: TrainConfig) -> Callable[[int, np.random.Generator], Batch]:
    d = cfg.data

    def batch(step: int, rng: np.random.Generator) -> Batch:
        samples = []
        for i in range(cfg.optim.batch_size):
            s = make_synthetic(sample_seed(cfg.optim.seed, step, i), d.height, d.width,
                               d.motion_kind, d.max_flow)
            if d.augment:
                s = augment(s, d.policy, rng)
            samples.append(s)
        return stack_samples(samples)

    return batch


def validation_set(cfg: TrainConfig, n: int | None = None, kind: str = "constant_translation") -> Batch:
    d = cfg.data
    n = cfg.val_samples if n is None else n
    return stack_samples([make_synthetic(cfg.val_seed + i, d.height, d.width, kind, d.max_flow)
                          for i in range(n)])


def validate(model: FlowModel, batch: Batch, iters: int, chunk: int = 8,
             upsample: str | None = None) -> dict:
    i1, i2, fl, va = batch
    preds = [model.predict(i1[s:s + chunk], i2[s:s + chunk], iters=iters, upsample=upsample)
             for s in range(0, len(i1), chunk)]
    return evaluate(np.concatenate(preds), fl, va)


# --------------------------------------------------------------------------
# training


def train(cfg: TrainConfig, data_stream: Callable[[int, np.random.Generator], Batch] | None = None,
          out_dir: str | Path | None = None, model: FlowModel | None = None,
          val_batch: Batch | None = None, log_every: int = 50) -> TrainResult:
    """Optimise the sequence loss on ``data_stream`` for ``cfg.optim.steps`` steps.

    Deterministic given the config: data come from per-step seeds and the
    augmentation RNG is seeded from ``cfg.optim.seed``.
    """
    cfg.validate()
    oc = cfg.optim
    model = model or FlowModel.init(cfg.model, seed=oc.seed)
    opt = AdamW(model.params, oc)
    rng = np.random.default_rng(oc.seed)
    stream = data_stream or synthetic_stream(cfg)
    if val_batch is None and cfg.val_every > 0:
        val_batch = validation_set(cfg)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(CSV_FIELDS)
    config_text = format_kv(cfg)
    history: list[dict] = []

    try:
        for step in range(1, oc.steps + 1):
            i1, i2, fl, va = stream(step, rng)
            res = model.forward(i1, i2, iters=cfg.model.update.iterations_train, train=True)
            loss = sequence_loss(res.predictions, fl, va, cfg.loss.gamma)
            lv = loss.item()
            if not math.isfinite(lv):
                snap = model_to_checkpoint(model, config_text, step, opt, rng.bit_generator.state)
                if out is not None:
                    ckpt_io.save(snap, out / "abort.ckpt")
                raise TrainingAborted(f"non-finite loss {lv} at step {step}", snap)
            loss.backward()
            gmax = clip_gradients(model.params, oc.clip)
            lr = one_cycle_lr(step - 1, oc.steps, oc.lr, oc.warmup_frac)
            opt.step(lr)
            opt.zero_grad()
            rec = {"step": step, "loss": lv, "lr": lr, "grad_max": gmax, "epe": None, "f1_all": None}
            if cfg.val_every > 0 and (step % cfg.val_every == 0 or step == oc.steps):
                m = validate(model, val_batch, cfg.val_iters)
                rec["epe"], rec["f1_all"] = m["epe"], m["f1_all"]
                log.info("step %d loss %.4f val epe %.3f f1 %.1f", step, lv, m["epe"], m["f1_all"])
            elif step % log_every == 0:
                log.info("step %d loss %.4f lr %.2e", step, lv, lr)
            history.append(rec)
            if writer is not None:
                writer.writerow([step, repr(lv), "" if rec["epe"] is None else repr(rec["epe"]),
                                 "" if rec["f1_all"] is None else repr(rec["f1_all"]), repr(lr)])
    finally:
        if writer is not None:
            fh.close()

    final = model_to_checkpoint(model, config_text, oc.steps, opt, rng.bit_generator.state)
    if out is not None:
        ckpt_io.save(final, out / "model.ckpt")
    return TrainResult(model, opt, history, final)
