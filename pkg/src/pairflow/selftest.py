"""Quick invariant suite: every fast kernel against its slow reference.

Runs in the 64-bit profile regardless of ``FLOW_PROFILE`` and finishes in a
few seconds. ``run()`` prints one PASS/FAIL line per check.
"""
from __future__ import annotations

import io
import sys
import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from . import oracles
from . import tensor as T
from .config import LookupConfig, UpdateConfig
from .correlation import build_pooled, build_pyramid, build_volume, lookup, lookup_ondemand
from .gradcheck import check_gradients
from .io import flow_to_color, read_flo, write_flo
from .tensor import Tensor
from .training.loss import sequence_loss
from .update import UpdateState, gru_step, init_update, upsample_bilinear, upsample_convex, warm_start

Check = Callable[[np.random.Generator], tuple[bool, str]]


def _close(a, b, tol) -> tuple[bool, str]:
    err = float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0
    return err <= tol, f"max abs err {err:.2e} (tol {tol:.0e})"


def conv_oracle(rng):
    x, k, b = rng.normal(size=(2, 3, 6, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
    return _close(out, oracles.conv2d_loops(x, k, b, 2, 1), 1e-10)


def matmul_oracle(rng):
    a, b = rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
    return _close(T.matmul(Tensor(a), Tensor(b)).data, oracles.matmul_loops(a, b), 1e-12)


def pool_oracle(rng):
    x = rng.normal(size=(2, 8, 8))
    return _close(T.avg_pool2d(Tensor(x), 4).data, oracles.block_mean(x, 4), 1e-14)


def bilinear_oracle(rng):
    field = rng.normal(size=(2, 5, 6))
    pts = rng.uniform(-1, 6.5, size=(40, 2))
    ref = np.stack([oracles.bilinear_point(field, x, y) for x, y in pts])
    return _close(T.bilinear_sample(Tensor(field), Tensor(pts)).data, ref, 1e-12)


def gradients(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    pts = Tensor(rng.uniform(0.2, 3.8, size=(6, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 3, 5, 5)))
    w2 = Tensor(rng.normal(size=(6, 2)))

    def fn():
        y = T.tanh(T.conv2d(x, k, padding=1))
        s = T.bilinear_sample(T.reshape(x, (2, 5, 5)), pts) * w2
        return T.sum(T.softmax(y, axis=1) * w) + T.sum(y * w) + T.sum(s)

    err = check_gradients(fn, [x, k, pts], n_samples=10)
    return err < 1e-5, f"worst relative error {err:.2e}"


def volume_oracle(rng):
    f1, f2 = rng.normal(size=(1, 8, 3, 4)), rng.normal(size=(1, 8, 3, 4))
    vol = build_volume(Tensor(f1), Tensor(f2)).data[0]
    return _close(vol, oracles.volume_loops(f1[0], f2[0], 1 / np.sqrt(8)), 1e-10)


def lookup_oracle(rng):
    f1, f2 = rng.normal(size=(1, 4, 4, 4)), rng.normal(size=(1, 4, 4, 4))
    flow = rng.uniform(-2, 2, size=(1, 2, 4, 4))
    vol = build_volume(Tensor(f1), Tensor(f2))
    cfg = LookupConfig(radius=1, levels=2)
    out = lookup(build_pyramid(vol, 2), Tensor(flow), cfg).data[0]
    return _close(out, oracles.lookup_gather(vol.data[0], flow[0], 1, 2), 1e-10)


def ondemand_equivalence(rng):
    f1, f2 = Tensor(rng.normal(size=(2, 6, 8, 8))), Tensor(rng.normal(size=(2, 6, 8, 8)))
    flow = Tensor(rng.uniform(-3, 3, size=(2, 2, 8, 8)))
    cfg = LookupConfig(radius=2, levels=4)
    a = lookup(build_pyramid(build_volume(f1, f2), 4), flow, cfg).data
    b = lookup_ondemand(build_pooled(f1, f2, 4), flow, cfg).data
    return _close(a, b, 1e-10)


def gru_oracle(rng):
    cfg = UpdateConfig(hidden_dim=4, corr_widths=(4, 3), flow_widths=(2, 2))
    params: dict = {}
    init_update(params, "u", cfg, LookupConfig(radius=0, levels=1), 2, rng)
    h = np.tanh(rng.normal(size=(1, 4, 3, 4)))
    x = rng.normal(size=(1, cfg.motion_dim + 2, 3, 4))
    out = gru_step(UpdateState(Tensor(h), None), Tensor(x), params, "u", cfg).hidden.data
    p = [params[f"u.gru.conv{g}.{n}"].data for g in "zrq" for n in ("weight", "bias")]
    return _close(out[0], oracles.gru_pixel_loop(h[0], x[0], *p), 1e-10)


def upsample_units(rng):
    c = np.broadcast_to(np.array([1.25, -3.0])[None, :, None, None], (1, 2, 3, 4)).copy()
    up_c = upsample_convex(Tensor(c), Tensor(rng.normal(size=(1, 576, 3, 4)) * 3)).data
    up_b = upsample_bilinear(Tensor(c)).data
    ok1, d1 = _close(up_c, np.broadcast_to(8 * c[:, :, :1, :1], up_c.shape), 1e-12)
    ok2, d2 = _close(up_b, np.broadcast_to(8 * c[:, :, :1, :1], up_b.shape), 1e-12)
    return ok1 and ok2, f"convex {d1}; bilinear {d2}"


def warm_start_oracle(rng):
    flow = rng.uniform(-3, 3, size=(2, 6, 7))
    H, W = 6, 7
    votes = np.zeros_like(flow)
    best = np.full((H, W), np.inf)
    for i in range(H):
        for j in range(W):
            u, v = flow[:, i, j]
            tx, ty = int(np.rint(j + u)), int(np.rint(i + v))
            if 0 <= tx < W and 0 <= ty < H and np.hypot(u, v) < best[ty, tx]:
                best[ty, tx] = np.hypot(u, v)
                votes[:, ty, tx] = (u, v)
    return _close(warm_start(flow), oracles.nearest_fill(votes, np.isfinite(best)), 0.0)


def loss_oracle(rng):
    gt = rng.normal(size=(1, 2, 3, 4))
    valid = rng.uniform(size=(1, 3, 4)) < 0.7
    valid[0, 0, 0] = True
    preds = [gt + rng.normal(size=gt.shape) for _ in range(3)]
    got = sequence_loss([Tensor(p) for p in preds], gt, valid, 0.8).item()
    return _close(got, oracles.sequence_loss_hand(preds, gt, valid, 0.8), 1e-12)


def flo_roundtrip(rng):
    flow = rng.normal(size=(2, 5, 9)).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "f.flo"
        write_flo(p, flow)
        back = read_flo(p)
    return back.tobytes() == flow.tobytes(), "bit-identical" if back.tobytes() == flow.tobytes() else "differs"


def zero_flow_white(rng):
    img = flow_to_color(np.zeros((2, 4, 4)))
    return bool(np.all(img == 255)), f"values {np.unique(img).tolist()}"


CHECKS: dict[str, Check] = {
    "conv2d vs loops": conv_oracle,
    "matmul vs loops": matmul_oracle,
    "avg_pool2d vs block mean": pool_oracle,
    "bilinear vs 4-term formula": bilinear_oracle,
    "finite-difference gradients": gradients,
    "correlation volume vs loops": volume_oracle,
    "lookup vs direct gather": lookup_oracle,
    "on-demand lookup == pyramid lookup": ondemand_equivalence,
    "GRU vs per-pixel loop": gru_oracle,
    "upsampling units (constant -> 8c)": upsample_units,
    "warm start vs brute-force fill": warm_start_oracle,
    "sequence loss vs hand loop": loss_oracle,
    ".flo round trip": flo_roundtrip,
    "zero flow renders white": zero_flow_white,
}


def run(out: io.TextIOBase | None = None, seed: int = 0) -> bool:
    out = out or sys.stdout
    prev = T.get_profile()
    T.set_profile("test64")
    ok_all = True
    try:
        for name, check in CHECKS.items():
            try:
                ok, detail = check(np.random.default_rng(seed))
            except Exception as exc:           # a crash is a failure, not an abort
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            ok_all &= ok
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}", file=out)
    finally:
        T.set_profile(prev)
    return ok_all
