"""Photometric, spatial and occlusion augmentation of synthetic samples."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..config import AugmentPolicy
from .data import SyntheticSample

_GRAY = np.array([0.299, 0.587, 0.114])
_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def color_jitter(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Brightness, contrast, saturation and hue perturbation of a [-1, 1] image."""
    x = (img + 1.0) / 2.0
    b = rng.uniform(max(0.0, 1 - policy.brightness), 1 + policy.brightness)
    c = rng.uniform(max(0.0, 1 - policy.contrast), 1 + policy.contrast)
    s = rng.uniform(max(0.0, 1 - policy.saturation), 1 + policy.saturation)
    h = rng.uniform(-policy.hue, policy.hue)
    x = np.clip(x * b, 0, 1)
    gray = np.tensordot(_GRAY, x, axes=1)
    x = np.clip((x - gray.mean()) * c + gray.mean(), 0, 1)
    gray = np.tensordot(_GRAY, x, axes=1)
    x = np.clip((x - gray) * s + gray, 0, 1)
    # hue: rotate the chroma plane in YIQ space by a fraction h of a full turn
    a = 2 * np.pi * h
    rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    m = _YIQ2RGB @ rot @ _RGB2YIQ
    x = np.clip(np.tensordot(m, x, axes=1), 0, 1)
    return x * 2.0 - 1.0


def _resample(arr: np.ndarray, sx: float, sy: float, out_h: int, out_w: int, order: int) -> np.ndarray:
    """Resize ``arr[C,H,W]`` by (sx, sy) with pixel-centre alignment."""
    ys, xs = np.meshgrid((np.arange(out_h) + 0.5) / sy - 0.5, (np.arange(out_w) + 0.5) / sx - 0.5,
                         indexing="ij")
    return np.stack([ndimage.map_coordinates(c, [ys, xs], order=order, mode="nearest") for c in arr])


def spatial_transform(sample: SyntheticSample, sx: float, sy: float, x0: int, y0: int,
                      out_h: int, out_w: int) -> SyntheticSample:
    """Rescale by (sx, sy) then crop the ``out_h x out_w`` window at (x0, y0)."""
    H, W = sample.shape
    nh, nw = int(round(H * sy)), int(round(W * sx))
    sx, sy = nw / W, nh / H
    i1 = _resample(sample.image1, sx, sy, nh, nw, 1)
    i2 = _resample(sample.image2, sx, sy, nh, nw, 1)
    fl = _resample(sample.flow, sx, sy, nh, nw, 1) * np.array([sx, sy])[:, None, None]
    va = _resample(sample.valid.astype(np.float64), sx, sy, nh, nw, 0) > 0.5
    win = (slice(None), slice(y0, y0 + out_h), slice(x0, x0 + out_w))
    fl, va = fl[win], va[win]
    # targets that leave the crop window are no longer observable
    ys, xs = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    tx, ty = xs + fl[0], ys + fl[1]
    va = va & ((tx >= 0) & (tx <= out_w - 1) & (ty >= 0) & (ty <= out_h - 1))[None]
    return SyntheticSample(i1[win], i2[win], fl, va)


def erase(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> tuple[np.ndarray, list]:
    """Fill random rectangles of ``img`` with its mean colour."""
    out = img.copy()
    H, W = img.shape[-2:]
    fill = img.reshape(3, -1).mean(axis=1)[:, None, None]
    rects = []
    for _ in range(rng.integers(*policy.erase_count)):
        x = int(rng.integers(0, W))
        y = int(rng.integers(0, H))
        dx = int(rng.integers(*policy.erase_size))
        dy = int(rng.integers(*policy.erase_size))
        out[:, y:y + dy, x:x + dx] = fill
        rects.append((x, y, dx, dy))
    return out, rects


def augment(sample: SyntheticSample, policy: AugmentPolicy, rng: np.random.Generator,
            crop: tuple[int, int] | None = None) -> SyntheticSample:
    """Apply the policy; output extents are ``crop`` (default: the input's)."""
    H, W = sample.shape
    out_h, out_w = crop or (H, W)
    i1, i2 = sample.image1, sample.image2

    if rng.uniform() < policy.color_prob:
        if rng.uniform() < policy.asymmetric_color_prob:
            i1 = color_jitter(i1, rng, policy)
            i2 = color_jitter(i2, rng, policy)
        else:
            state = rng.bit_generator.state
            i1 = color_jitter(i1, rng, policy)
            rng.bit_generator.state = state
            i2 = color_jitter(i2, rng, policy)
    if rng.uniform() < policy.erase_prob:
        i2, _ = erase(i2, rng, policy)
    sample = SyntheticSample(i1, i2, sample.flow, sample.valid)

    sx = sy = 1.0
    if rng.uniform() < policy.spatial_prob:
        s = 2.0 ** rng.uniform(*policy.log2_scale)
        sx = sy = s
        if rng.uniform() < policy.stretch_prob:
            sx *= 2.0 ** rng.uniform(-policy.log2_stretch, policy.log2_stretch)
            sy *= 2.0 ** rng.uniform(-policy.log2_stretch, policy.log2_stretch)
    # never shrink below the crop window
    sx, sy = max(sx, out_w / W), max(sy, out_h / H)
    if sx == 1.0 and sy == 1.0 and (out_h, out_w) == (H, W):
        return sample
    nh, nw = int(round(H * sy)), int(round(W * sx))
    y0 = int(rng.integers(0, nh - out_h + 1))
    x0 = int(rng.integers(0, nw - out_w + 1))
    return spatial_transform(sample, sx, sy, x0, y0, out_h, out_w)
