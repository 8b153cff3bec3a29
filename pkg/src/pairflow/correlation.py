"""All-pairs correlation volume, pooled pyramid and radius-r lookup.

Two interchangeable lookup paths are provided. ``lookup`` samples a
precomputed pyramid of pooled volumes (O(N^2) memory). ``lookup_ondemand``
keeps only pooled copies of the second frame's features and forms each
correlation as an inner product at sample time (O(N D L) memory). Because
pooling and bilinear sampling are linear, the two agree to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LookupConfig
from .tensor import DimensionError, Tensor


def _values(f) -> Tensor:
    return f.values if hasattr(f, "values") else f


def correlation_scale(dim: int, cfg: LookupConfig | None = None) -> float:
    if cfg is not None and cfg.scale == "none":
        return 1.0
    return 1.0 / np.sqrt(dim)


def build_volume(f1, f2, scale: float | None = None) -> Tensor:
    """``C[b,i,j,k,l] = scale * sum_h f1[b,h,i,j] f2[b,h,k,l]`` as one batched matmul.

    Inputs are ``[B,D,H,W]`` (or FeatureMaps); ``scale`` defaults to 1/sqrt(D).
    """
    f1, f2 = _values(f1), _values(f2)
    if f1.shape != f2.shape or f1.ndim != 4:
        raise DimensionError(f"build_volume: feature shapes {f1.shape} and {f2.shape} must match")
    B, D, H, W = f1.shape
    s = 1.0 / np.sqrt(D) if scale is None else scale
    a = T.transpose(T.reshape(f1, (B, D, H * W)), (0, 2, 1))
    b = T.reshape(f2, (B, D, H * W))
    vol = T.matmul(a, b) * s
    return T.reshape(vol, (B, H, W, H, W))


@dataclass
class CorrelationPyramid:
    levels: list[Tensor]   # level k: [B*H*W, 1, H/2^k, W/2^k]
    batch: int
    height: int
    width: int
    scale: float

    def nbytes(self) -> int:
        return int(np.sum([lvl.data.nbytes for lvl in self.levels]))


@dataclass
class PooledFeatures:
    f1: Tensor             # [B, D, H, W]
    levels: list[Tensor]   # level k: pooled f2, [B, D, H/2^k, W/2^k]
    scale: float

    def nbytes(self) -> int:
        return int(self.f1.data.nbytes + np.sum([lvl.data.nbytes for lvl in self.levels]))


def _check_divisible(h: int, w: int, levels: int) -> None:
    m = 2 ** (levels - 1)
    if h % m or w % m:
        raise DimensionError(f"extents {h}x{w} not divisible by 2^(levels-1)={m}; pad the features first")


def build_pyramid(volume: Tensor, levels: int = 4, scale: float = 1.0) -> CorrelationPyramid:
    """Pool the frame-2 axes of ``volume[B,H,W,H,W]`` with kernels 1, 2, 4, ..."""
    B, H, W, H2, W2 = volume.shape
    _check_divisible(H2, W2, levels)
    base = T.reshape(volume, (B * H * W, 1, H2, W2))
    return CorrelationPyramid([T.avg_pool2d(base, 2 ** k) for k in range(levels)], B, H, W, scale)


def build_pooled(f1, f2, levels: int = 4, scale: float | None = None) -> PooledFeatures:
    f1, f2 = _values(f1), _values(f2)
    if f1.shape != f2.shape:
        raise DimensionError(f"build_pooled: feature shapes {f1.shape} and {f2.shape} must match")
    _check_divisible(f2.shape[2], f2.shape[3], levels)
    s = 1.0 / np.sqrt(f1.shape[1]) if scale is None else scale
    return PooledFeatures(f1, [T.avg_pool2d(f2, 2 ** k) for k in range(levels)], s)


def coords_grid(batch: int, h: int, w: int) -> np.ndarray:
    """``[B,2,H,W]`` pixel coordinates, channel 0 = x, channel 1 = y."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    g = np.stack([xs, ys]).astype(np.float64)
    return np.broadcast_to(g, (batch, 2, h, w)).copy()


def _sample_points(flow: Tensor, level: int, offsets: np.ndarray) -> Tensor:
    """Per-pixel sample locations ``[B, H*W, K, 2]`` at pyramid ``level``."""
    B, _, H, W = flow.shape
    K = len(offsets)
    base = Tensor(coords_grid(B, H, W))
    centre = T.transpose(base + flow, (0, 2, 3, 1)) * (1.0 / 2 ** level)
    centre = T.broadcast_to(T.reshape(centre, (B, H * W, 1, 2)), (B, H * W, K, 2))
    delta = Tensor(np.broadcast_to(offsets.reshape(1, 1, K, 2), (B, H * W, K, 2)).copy())
    return centre + delta


def _check_flow(flow: Tensor, b: int, h: int, w: int) -> None:
    if flow.shape != (b, 2, h, w):
        raise DimensionError(f"flow shape {flow.shape} != {(b, 2, h, w)}")


def lookup(pyramid: CorrelationPyramid, flow: Tensor, cfg: LookupConfig) -> Tensor:
    """Correlation features ``[B, L*K, H, W]`` around ``x + flow(x)`` at every level.

    Channels are grouped by level, each group in row-major offset order.
    """
    B, H, W = pyramid.batch, pyramid.height, pyramid.width
    _check_flow(flow, B, H, W)
    offsets = np.array(cfg.offsets(), dtype=np.float64)
    K = len(offsets)
    out = []
    for k in range(min(cfg.levels, len(pyramid.levels))):
        pts = T.reshape(_sample_points(flow, k, offsets), (B * H * W, K, 2))
        vals = T.grid_sample(pyramid.levels[k], pts)           # [B*H*W, K, 1]
        vals = T.transpose(T.reshape(vals, (B, H, W, K)), (0, 3, 1, 2))
        out.append(vals)
    return out[0] if len(out) == 1 else T.concat(out, axis=1)


def lookup_ondemand(pooled: PooledFeatures, flow: Tensor, cfg: LookupConfig) -> Tensor:
    """Same contract as :func:`lookup`, computing each correlation when sampled."""
    f1 = pooled.f1
    B, D, H, W = f1.shape
    _check_flow(flow, B, H, W)
    offsets = np.array(cfg.offsets(), dtype=np.float64)
    K = len(offsets)
    f1_rows = T.reshape(T.transpose(T.reshape(f1, (B, D, H * W)), (0, 2, 1)), (B, H * W, 1, D))
    f1_rows = T.broadcast_to(f1_rows, (B, H * W, K, D))
    out = []
    for k in range(min(cfg.levels, len(pooled.levels))):
        pts = T.reshape(_sample_points(flow, k, offsets), (B, H * W * K, 2))
        g2 = T.reshape(T.grid_sample(pooled.levels[k], pts), (B, H * W, K, D))
        corr = T.sum(f1_rows * g2, axis=3) * pooled.scale          # [B, H*W, K]
        out.append(T.transpose(T.reshape(corr, (B, H, W, K)), (0, 3, 1, 2)))
    return out[0] if len(out) == 1 else T.concat(out, axis=1)


class CorrelationBlock:
    """Builds the configured correlation source once per image pair."""

    def __init__(self, f1: Tensor, f2: Tensor, cfg: LookupConfig):
        self.cfg = cfg
        s = correlation_scale(f1.shape[1], cfg)
        if cfg.mode == "pyramid":
            self.source = build_pyramid(build_volume(f1, f2, s), cfg.levels, s)
        else:
            self.source = build_pooled(f1, f2, cfg.levels, s)

    def __call__(self, flow: Tensor) -> Tensor:
        if isinstance(self.source, CorrelationPyramid):
            return lookup(self.source, flow, self.cfg)
        return lookup_ondemand(self.source, flow, self.cfg)
