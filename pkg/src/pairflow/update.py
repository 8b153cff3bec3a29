"""Recurrent update operator, flow head and the two 8x upsamplers.

Flow tensors are ``[B,2,H,W]`` with channel 0 horizontal (u) and channel 1
vertical (v), in pixels of their own resolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .config import LookupConfig, UpdateConfig
from .layers import conv, init_conv
from .tensor import DimensionError, Tensor

UP = 8


@dataclass
class UpdateState:
    hidden: Tensor           # [B, Ch, H, W], entries in (-1, 1)
    context: Tensor | None   # [B, Cc, H, W], fixed across iterations


class Step(NamedTuple):
    flow: Tensor     # f_{k+1}
    delta: Tensor    # the update that produced it
    hidden: Tensor


def _init(params, name, cin, cout, kh, kw=None, rng=None):
    # small init for the recurrent block keeps early updates near zero
    init_conv(params, name, cin, cout, kh, kw, rng=rng, gain=1.0 / 3.0, fan="in")


def init_update(params: dict, prefix: str, cfg: UpdateConfig, lookup_cfg: LookupConfig,
                context_dim: int, rng: np.random.Generator) -> None:
    c0, c1 = cfg.corr_widths
    q0, q1 = cfg.flow_widths
    hd = cfg.hidden_dim
    _init(params, f"{prefix}.convc1", lookup_cfg.channels, c0, 1, rng=rng)
    _init(params, f"{prefix}.convc2", c0, c1, 3, rng=rng)
    _init(params, f"{prefix}.convf1", 2, q0, 7, rng=rng)
    _init(params, f"{prefix}.convf2", q0, q1, 3, rng=rng)
    xd = cfg.motion_dim + (context_dim if cfg.use_context else 0)
    if cfg.gru_kind == "conv3x3":
        for g in "zrq":
            _init(params, f"{prefix}.gru.conv{g}", hd + xd, hd, 3, rng=rng)
    elif cfg.gru_kind == "separable_1x5_5x1":
        for g in "zrq":
            _init(params, f"{prefix}.gru.conv{g}1", hd + xd, hd, 1, 5, rng=rng)
            _init(params, f"{prefix}.gru.conv{g}2", hd + xd, hd, 5, 1, rng=rng)
    else:
        _init(params, f"{prefix}.gru.conv1", hd + xd, hd, 3, rng=rng)
        _init(params, f"{prefix}.gru.conv2", hd, hd, 3, rng=rng)
        _init(params, f"{prefix}.gru.conv3", hd, hd, 3, rng=rng)
    _init(params, f"{prefix}.head.conv1", hd, cfg.head_dim, 3, rng=rng)
    _init(params, f"{prefix}.head.conv2", cfg.head_dim, 2, 3, rng=rng)
    if cfg.upsample_kind == "convex":
        _init(params, f"{prefix}.mask.conv1", hd, cfg.mask_dim, 3, rng=rng)
        _init(params, f"{prefix}.mask.conv2", cfg.mask_dim, UP * UP * 9, 1, rng=rng)


def motion_features(corr_feats: Tensor, flow: Tensor, params: dict, prefix: str,
                    cfg: UpdateConfig) -> Tensor:
    """Two convs on the correlation features, two on the flow, then the raw flow."""
    if corr_feats.shape[0] != flow.shape[0] or corr_feats.shape[2:] != flow.shape[2:]:
        raise DimensionError(f"motion_features: corr {corr_feats.shape} vs flow {flow.shape}")
    c = T.relu(conv(corr_feats, params, f"{prefix}.convc1"))
    c = T.relu(conv(c, params, f"{prefix}.convc2"))
    f = T.relu(conv(flow, params, f"{prefix}.convf1"))
    f = T.relu(conv(f, params, f"{prefix}.convf2"))
    parts = [c, f, flow] if cfg.append_raw_flow else [c, f]
    return T.concat(parts, axis=1)


def _gru(h: Tensor, x: Tensor, params: dict, p: str, suffix: str = "") -> Tensor:
    hx = T.concat([h, x], axis=1)
    z = T.sigmoid(conv(hx, params, f"{p}.convz{suffix}"))
    r = T.sigmoid(conv(hx, params, f"{p}.convr{suffix}"))
    q = T.tanh(conv(T.concat([r * h, x], axis=1), params, f"{p}.convq{suffix}"))
    return (1.0 - z) * h + z * q


def gru_step(state: UpdateState, x: Tensor, params: dict, prefix: str, cfg: UpdateConfig) -> UpdateState:
    p = f"{prefix}.gru"
    h = state.hidden
    if cfg.gru_kind == "conv3x3":
        h = _gru(h, x, params, p)
    elif cfg.gru_kind == "separable_1x5_5x1":
        h = _gru(h, x, params, p, "1")
        h = _gru(h, x, params, p, "2")
    else:
        h = T.relu(conv(T.concat([h, x], axis=1), params, f"{p}.conv1"))
        h = T.relu(conv(h, params, f"{p}.conv2"))
        h = T.relu(conv(h, params, f"{p}.conv3"))
    return UpdateState(h, state.context)


def flow_head(hidden: Tensor, params: dict, prefix: str) -> Tensor:
    """Two convs, linear output: the flow update at 1/8 resolution."""
    return conv(T.relu(conv(hidden, params, f"{prefix}.head.conv1")), params, f"{prefix}.head.conv2")


def mask_head(hidden: Tensor, params: dict, prefix: str) -> Tensor:
    return conv(T.relu(conv(hidden, params, f"{prefix}.mask.conv1")), params, f"{prefix}.mask.conv2")


def step_prefix(prefix: str, cfg: UpdateConfig, k: int) -> str:
    if cfg.tied_weights:
        return prefix
    return f"{prefix}.{min(k, cfg.iterations_train - 1)}"


def iterate(f0: Tensor, corr_fn: Callable[[Tensor], Tensor], state0: UpdateState, params: dict,
            cfg: UpdateConfig, n_iters: int, prefix: str = "update") -> list[Step]:
    """Run ``n_iters`` refinements from ``f0``.

    Each step looks up correlations at the detached current flow and adds the
    predicted update to that detached flow, so gradients reach earlier steps
    only through the hidden state.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    flow = f0
    state = state0
    steps: list[Step] = []
    for k in range(n_iters):
        p = step_prefix(prefix, cfg, k)
        base = T.detach(flow)
        corr = corr_fn(base)
        x = motion_features(corr, base, params, p, cfg)
        if cfg.use_context and state.context is not None:
            x = T.concat([x, state.context], axis=1)
        state = gru_step(state, x, params, p, cfg)
        delta = flow_head(state.hidden, params, p)
        flow = base + delta
        steps.append(Step(flow, delta, state.hidden))
    return steps


# --------------------------------------------------------------------------
# upsampling


def convex_weights(mask_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """``[B,576,H,W] -> [B,1,9,8,8,H,W]`` softmax weights over the 9 neighbours."""
    B, C, H, W = mask_logits.shape
    if C != 9 * UP * UP:
        raise DimensionError(f"mask needs {9 * UP * UP} channels, got {C}")
    m = T.reshape(mask_logits, (B, 1, 9, UP, UP, H, W))
    if temperature != 1.0:
        m = m * (1.0 / temperature)
    return T.softmax(m, axis=2)


def upsample_convex(flow: Tensor, mask_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Full-resolution flow as convex combinations of 8x-scaled 3x3 coarse neighbours.

    Neighbours beyond the border replicate the edge value, so a constant field
    stays constant.
    """
    B, _, H, W = flow.shape
    if mask_logits.shape[0] != B or mask_logits.shape[2:] != (H, W):
        raise DimensionError(f"mask {mask_logits.shape} does not match flow {flow.shape}")
    w = T.broadcast_to(convex_weights(mask_logits, temperature), (B, 2, 9, UP, UP, H, W))
    nb = T.unfold3x3(flow * float(UP), mode="edge")                      # [B,2,9,H,W]
    nb = T.broadcast_to(T.reshape(nb, (B, 2, 9, 1, 1, H, W)), (B, 2, 9, UP, UP, H, W))
    up = T.sum(w * nb, axis=2)                                           # [B,2,8,8,H,W]
    up = T.transpose(up, (0, 1, 4, 2, 5, 3))                             # [B,2,H,8,W,8]
    return T.reshape(up, (B, 2, UP * H, UP * W))


def _interp_matrix(n: int) -> np.ndarray:
    """``[8n, n]`` linear weights sampling coarse position X/8 (clamped)."""
    pos = np.clip(np.arange(UP * n) / UP, 0, n - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = pos - i0
    A = np.zeros((UP * n, n))
    A[np.arange(UP * n), i0] += 1.0 - frac
    A[np.arange(UP * n), i1] += frac
    return A


def upsample_bilinear(flow: Tensor) -> Tensor:
    """8x bilinear upsampling with values scaled by 8; full-res pixel X reads
    coarse position X/8, so coarse lattice points map to multiples of 8."""
    B, C, H, W = flow.shape
    Aw = Tensor(_interp_matrix(W).T)            # [W, 8W]
    Ah = Tensor(_interp_matrix(H).T)            # [H, 8H]
    x = T.matmul(T.reshape(flow, (B * C * H, W)), Aw)                     # [BCH, 8W]
    x = T.transpose(T.reshape(x, (B * C, H, UP * W)), (0, 2, 1))          # [BC, 8W, H]
    x = T.matmul(T.reshape(x, (B * C * UP * W, H)), Ah)                   # [BC8W, 8H]
    x = T.transpose(T.reshape(x, (B * C, UP * W, UP * H)), (0, 2, 1))
    return T.reshape(x, (B, C, UP * H, UP * W)) * float(UP)


def downsample_flow(flow: np.ndarray) -> np.ndarray:
    """Full-resolution ``[...,2,8H,8W]`` flow to 1/8 resolution (block mean / 8)."""
    *lead, c, H, W = flow.shape
    blocks = flow.reshape(*lead, c, H // UP, UP, W // UP, UP)
    return blocks.mean(axis=(-3, -1)) / UP


# --------------------------------------------------------------------------
# warm start


def warm_start(prev_flow: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Forward-project ``prev_flow[2,H,W]`` (or ``[B,2,H,W]``) one frame ahead.

    Pixel x votes its flow at round(x + f(x)); colliding votes keep the
    smallest magnitude (first in row-major order on exact ties); holes take
    the value of the nearest filled pixel (Euclidean, ties to row-major).
    """
    prev_flow = np.asarray(prev_flow)
    if prev_flow.ndim == 4:
        return np.stack([warm_start(f, chunk) for f in prev_flow])
    _, H, W = prev_flow.shape
    u, v = prev_flow
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    tx = np.rint(xs + u).astype(np.int64).ravel()
    ty = np.rint(ys + v).astype(np.int64).ravel()
    mag = np.hypot(u, v).ravel()
    src = np.arange(H * W)
    inside = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H)
    tgt = ty[inside] * W + tx[inside]
    src, mag = src[inside], mag[inside]
    # lexsort: primary target, then magnitude, then source order
    order = np.lexsort((src, mag, tgt))
    tgt_sorted = tgt[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    winners_tgt = tgt_sorted[first]
    winners_src = src[order][first]

    out = np.zeros((2, H * W), dtype=prev_flow.dtype)
    filled = np.zeros(H * W, dtype=bool)
    flat = prev_flow.reshape(2, -1)
    out[:, winners_tgt] = flat[:, winners_src]
    filled[winners_tgt] = True
    if not filled.any():
        return np.zeros_like(prev_flow)
    holes = np.flatnonzero(~filled)
    fidx = np.flatnonzero(filled)              # row-major order
    fy, fx = np.divmod(fidx, W)
    for s in range(0, len(holes), chunk):
        h = holes[s:s + chunk]
        hy, hx = np.divmod(h, W)
        d2 = (hy[:, None] - fy[None, :]) ** 2 + (hx[:, None] - fx[None, :]) ** 2
        out[:, h] = out[:, fidx[np.argmin(d2, axis=1)]]
    return out.reshape(2, H, W)
