"""Middlebury ``.flo`` files, 8-bit image loading and flow colour coding."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

FLO_MAGIC = b"PIEH"   # reads as float32 202021.25


class FlowFileError(ValueError):
    pass


def write_flo(path: str | Path, flow: np.ndarray) -> None:
    """Write ``flow[2,H,W]`` (u, v) as interleaved little-endian float32."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FlowFileError(f"expected a [2,H,W] flow, got {flow.shape}")
    _, H, W = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(np.array([W, H], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes())


def read_flo(path: str | Path) -> np.ndarray:
    """Read a ``.flo`` file as a float32 ``[2,H,W]`` array."""
    raw = Path(path).read_bytes()
    if raw[:4] != FLO_MAGIC:
        raise FlowFileError(f"{path}: bad magic {raw[:4]!r}")
    W, H = np.frombuffer(raw[4:12], dtype="<i4")
    if W <= 0 or H <= 0:
        raise FlowFileError(f"{path}: invalid extents {W}x{H}")
    n = int(W) * int(H) * 2
    if len(raw) != 12 + 4 * n:
        raise FlowFileError(f"{path}: expected {12 + 4 * n} bytes, found {len(raw)}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(H, W, 2)
    return data.transpose(2, 0, 1).astype(np.float32)


def read_image(path: str | Path) -> np.ndarray:
    """8-bit RGB image (PNG, PPM, ...) as ``[3,H,W]`` float64 in [-1, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 127.5 - 1.0


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write a ``[3,H,W]`` image in [-1, 1] as 8-bit RGB."""
    arr = np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


# --------------------------------------------------------------------------
# colour coding


def make_colorwheel() -> np.ndarray:
    """The 55-entry Middlebury colour wheel, RGB in [0, 255]."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """``[H,W,3]`` uint8 rendering: hue encodes direction, saturation magnitude.

    ``max_mag`` defaults to the field's 99th-percentile magnitude.
    """
    u, v = np.asarray(flow, dtype=np.float64)
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(np.percentile(mag, 99)) if mag.size else 0.0
    scale = max_mag if max_mag > 0 else 1.0
    u, v = u / scale, v / scale
    rad = np.minimum(np.hypot(u, v), 1.0)
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(u.shape + (3,))
    for c in range(3):
        col = (1 - f) * wheel[k0, c] / 255.0 + f * wheel[k1, c] / 255.0
        img[..., c] = 1 - rad * (1 - col)
    return np.floor(255 * img).astype(np.uint8)


def write_flow_png(path: str | Path, flow: np.ndarray, max_mag: float | None = None) -> None:
    Image.fromarray(flow_to_color(flow, max_mag)).save(path)
