"""Parameter initialisation and the small conv/norm building blocks.

Parameters live in a flat ``dict[str, Tensor]``; running batch-norm
statistics live in a separate ``dict[str, np.ndarray]`` of buffers.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


def init_conv(params: dict, name: str, cin: int, cout: int, kh: int, kw: int | None = None,
              rng: np.random.Generator | None = None, bias: bool = True, gain: float = 2.0,
              fan: str = "out") -> None:
    """Zero-mean normal weights with variance ``gain / fan`` (He init by default)."""
    kw = kh if kw is None else kw
    rng = rng or np.random.default_rng(0)
    n = cout * kh * kw if fan == "out" else cin * kh * kw
    std = np.sqrt(gain / n)
    params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, (cout, cin, kh, kw)), requires_grad=True)
    if bias:
        params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)


def conv(x: Tensor, params: dict, name: str, stride: int = 1, padding=None) -> Tensor:
    w = params[f"{name}.weight"]
    if padding is None:
        padding = (w.shape[2] // 2, w.shape[3] // 2)
    return T.conv2d(x, w, params.get(f"{name}.bias"), stride=stride, padding=padding)


def init_norm(params: dict, buffers: dict, name: str, kind: str, channels: int) -> None:
    if kind == "none":
        return
    params[f"{name}.weight"] = Tensor(np.ones(channels), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(channels), requires_grad=True)
    if kind == "batch":
        buffers[f"{name}.running_mean"] = np.zeros(channels)
        buffers[f"{name}.running_var"] = np.ones(channels)


def norm(x: Tensor, params: dict, buffers: dict, name: str, kind: str, train: bool,
         notes: set | None = None) -> Tensor:
    if kind == "none":
        return x
    w, b = params[f"{name}.weight"], params[f"{name}.bias"]
    if kind == "instance":
        return T.channel_affine(T.normalize(x, (2, 3), NORM_EPS), w, b)
    # batch norm
    rm, rv = f"{name}.running_mean", f"{name}.running_var"
    if train:
        if x.shape[0] < 2:
            # batch statistics are undefined for one sample
            if notes is not None:
                notes.add("batch-norm replaced by instance-norm at batch size 1")
            return T.channel_affine(T.normalize(x, (2, 3), NORM_EPS), w, b)
        mu = x.data.mean(axis=(0, 2, 3))
        n = x.shape[0] * x.shape[2] * x.shape[3]
        var = x.data.var(axis=(0, 2, 3)) * n / max(n - 1, 1)
        buffers[rm] = (1 - BN_MOMENTUM) * buffers[rm] + BN_MOMENTUM * mu
        buffers[rv] = (1 - BN_MOMENTUM) * buffers[rv] + BN_MOMENTUM * var
        return T.channel_affine(T.normalize(x, (0, 2, 3), NORM_EPS), w, b)
    inv = 1.0 / np.sqrt(buffers[rv] + NORM_EPS)
    standardized = T.channel_affine(x, Tensor(inv), Tensor(-buffers[rm] * inv))
    return T.channel_affine(standardized, w, b)
