"""Feature and context encoders: images to 1/8-resolution feature maps.

Both share one architecture: a stride-2 7x7 stem, three stages of two blocks
(1/2, 1/4 and 1/8 resolution) and a final 1x1 projection. The feature encoder
is applied to both frames with the same weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import EncoderConfig
from .layers import conv, init_conv, init_norm, norm
from .tensor import DimensionError, Tensor


@dataclass
class FeatureMap:
    values: Tensor      # [B, D, H/8, W/8]
    source: str         # image1 | image2 | context


def _block_channels(cfg: EncoderConfig):
    """(name, cin, cout, stride) for each of the six blocks."""
    w0, w1, w2 = cfg.widths
    return [
        ("layer1.0", w0, w0, 1), ("layer1.1", w0, w0, 1),
        ("layer2.0", w0, w1, 2), ("layer2.1", w1, w1, 1),
        ("layer3.0", w1, w2, 2), ("layer3.1", w2, w2, 1),
    ]


def init_encoder(params: dict, buffers: dict, prefix: str, cfg: EncoderConfig,
                 rng: np.random.Generator) -> None:
    nk = cfg.norm_kind
    w0 = cfg.widths[0]
    init_conv(params, f"{prefix}.stem", 3, w0, 7, rng=rng)
    init_norm(params, buffers, f"{prefix}.stem_norm", nk, w0)
    for name, cin, cout, stride in _block_channels(cfg):
        p = f"{prefix}.{name}"
        if cfg.block_kind == "residual":
            init_conv(params, f"{p}.conv1", cin, cout, 3, rng=rng)
            init_conv(params, f"{p}.conv2", cout, cout, 3, rng=rng)
            init_norm(params, buffers, f"{p}.norm1", nk, cout)
            init_norm(params, buffers, f"{p}.norm2", nk, cout)
        else:
            mid = cout // 4
            init_conv(params, f"{p}.conv1", cin, mid, 1, rng=rng)
            init_conv(params, f"{p}.conv2", mid, mid, 3, rng=rng)
            init_conv(params, f"{p}.conv3", mid, cout, 1, rng=rng)
            for i, c in ((1, mid), (2, mid), (3, cout)):
                init_norm(params, buffers, f"{p}.norm{i}", nk, c)
        if stride != 1 or cin != cout:
            init_conv(params, f"{p}.down", cin, cout, 1, rng=rng)
            init_norm(params, buffers, f"{p}.down_norm", nk, cout)
    init_conv(params, f"{prefix}.out", cfg.widths[2], cfg.out_dim, 1, rng=rng)


def _block(x, params, buffers, p, cfg, stride, train, notes):
    nk = cfg.norm_kind
    if cfg.block_kind == "residual":
        y = T.relu(norm(conv(x, params, f"{p}.conv1", stride), params, buffers, f"{p}.norm1", nk, train, notes))
        y = T.relu(norm(conv(y, params, f"{p}.conv2"), params, buffers, f"{p}.norm2", nk, train, notes))
    else:
        y = T.relu(norm(conv(x, params, f"{p}.conv1"), params, buffers, f"{p}.norm1", nk, train, notes))
        y = T.relu(norm(conv(y, params, f"{p}.conv2", stride), params, buffers, f"{p}.norm2", nk, train, notes))
        y = T.relu(norm(conv(y, params, f"{p}.conv3"), params, buffers, f"{p}.norm3", nk, train, notes))
    if f"{p}.down.weight" in params:
        x = norm(conv(x, params, f"{p}.down", stride, padding=0), params, buffers,
                 f"{p}.down_norm", nk, train, notes)
    return T.relu(x + y)


def encode(images: Tensor, params: dict, buffers: dict, prefix: str, cfg: EncoderConfig,
           train: bool = False, notes: set | None = None) -> Tensor:
    """Run one encoder on ``images[B,3,H,W]``; returns ``[B, out_dim, H/8, W/8]``."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"encoder expects [B,3,H,W] images, got {images.shape}")
    H, W = images.shape[-2:]
    if H % 8 or W % 8:
        raise DimensionError(f"image extents {H}x{W} must be multiples of 8 (pad first)")
    x = conv(images, params, f"{prefix}.stem", stride=2)
    x = T.relu(norm(x, params, buffers, f"{prefix}.stem_norm", cfg.norm_kind, train, notes))
    for name, _, _, stride in _block_channels(cfg):
        x = _block(x, params, buffers, f"{prefix}.{name}", cfg, stride, train, notes)
    return conv(x, params, f"{prefix}.out", padding=0)


def encode_features(image: Tensor, params: dict, buffers: dict, cfg: EncoderConfig,
                    prefix: str = "fnet", train: bool = False, source: str = "image1") -> FeatureMap:
    return FeatureMap(encode(image, params, buffers, prefix, cfg, train), source)


def encode_context(image1: Tensor, params: dict, buffers: dict, cfg: EncoderConfig,
                   prefix: str = "cnet", train: bool = False, notes: set | None = None
                   ) -> tuple[Tensor, Tensor]:
    """Split the projected context output into ``(tanh(hidden), relu(context))``."""
    out = encode(image1, params, buffers, prefix, cfg, train, notes)
    nh, nc = cfg.context_split
    return T.tanh(out[:, :nh]), T.relu(out[:, nh:nh + nc])


def receptive_radius(cfg: EncoderConfig) -> int:
    """Half-width, in input pixels, of the encoder's receptive field."""
    # (kernel, stride) sequence along the deepest path
    seq = [(7, 2)]
    for _, _, _, stride in _block_channels(cfg):
        if cfg.block_kind == "residual":
            seq += [(3, stride), (3, 1)]
        else:
            seq += [(1, 1), (3, stride), (1, 1)]
    seq.append((1, 1))
    rf, jump = 1, 1
    for k, s in seq:
        rf += (k - 1) * jump
        jump *= s
    return rf // 2
