"""Synthetic image pairs with exactly known flow.

A smooth random texture is defined on a canvas larger than the frame and
evaluated off-grid with cubic splines. Frame 1 samples the texture on the
pixel grid; frame 2 samples it through the inverse of the motion, so that
``I2(x + f(x)) == I1(x)`` holds up to spline accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

MOTION_KINDS = ("constant_translation", "affine", "smooth_random_field")


@dataclass
class SyntheticSample:
    image1: np.ndarray   # [3,H,W] in [-1, 1]
    image2: np.ndarray   # [3,H,W]
    flow: np.ndarray     # [2,H,W], (u, v) in pixels
    valid: np.ndarray    # [1,H,W] bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.image1.shape[-2:]


def make_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Band-limited colour noise ``[3,h,w]`` roughly in [-1, 1]."""
    base = np.zeros((h, w))
    for sigma, amp in ((1.6, 0.45), (3.0, 0.35), (6.0, 0.25), (12.0, 0.2)):
        layer = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma, mode="wrap")
        base += amp * layer / (layer.std() + 1e-12)
    chans = []
    for _ in range(3):
        tint = ndimage.gaussian_filter(rng.normal(size=(h, w)), 6.0, mode="wrap")
        tint /= tint.std() + 1e-12
        chans.append(base + 0.3 * tint + rng.uniform(-0.2, 0.2))
    tex = np.stack(chans)
    return np.tanh(0.8 * tex)


def _sample(canvas: np.ndarray, xs: np.ndarray, ys: np.ndarray, order: int = 3) -> np.ndarray:
    coords = np.stack([ys.ravel(), xs.ravel()])
    out = [ndimage.map_coordinates(c, coords, order=order, mode="nearest") for c in canvas]
    return np.stack(out).reshape((canvas.shape[0],) + xs.shape)


def _random_translation(rng: np.random.Generator, max_flow: float) -> np.ndarray:
    r = max_flow * np.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * np.pi)
    return np.array([r * np.cos(a), r * np.sin(a)])


def make_synthetic(seed: int, height: int, width: int, motion_kind: str = "smooth_random_field",
                   max_flow: float = 8.0, translation=None, matrix=None) -> SyntheticSample:
    """One image pair with ground-truth flow.

    ``translation`` fixes the (u, v) shift for ``constant_translation`` and
    the offset for ``affine``; ``matrix`` fixes the 2x2 affine part (acting on
    (x, y) about the frame centre). Unset values are drawn from ``seed``.
    """
    if motion_kind not in MOTION_KINDS:
        raise ValueError(f"unknown motion kind {motion_kind!r}")
    rng = np.random.default_rng(seed)
    H, W = height, width
    margin = int(np.ceil(2 * max_flow)) + 8
    canvas = make_texture(rng, H + 2 * margin, W + 2 * margin)
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0

    if motion_kind == "constant_translation":
        t = _random_translation(rng, max_flow) if translation is None else np.asarray(translation, float)
        flow = np.stack([np.full((H, W), t[0]), np.full((H, W), t[1])])
        back = flow.copy()       # displacement of frame-2 pixels back to frame 1
    elif motion_kind == "affine":
        if matrix is None:
            ang = rng.uniform(-0.08, 0.08)
            s = np.exp(rng.uniform(-0.08, 0.08))
            matrix = s * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        A = np.asarray(matrix, float)
        t = (_random_translation(rng, 0.6 * max_flow) if translation is None
             else np.asarray(translation, float))
        dx, dy = xs - cx, ys - cy
        flow = np.stack([(A[0, 0] - 1) * dx + A[0, 1] * dy + t[0],
                         A[1, 0] * dx + (A[1, 1] - 1) * dy + t[1]])
        Ai = np.linalg.inv(A)
        qx, qy = dx - t[0], dy - t[1]
        back = np.stack([dx - (Ai[0, 0] * qx + Ai[0, 1] * qy), dy - (Ai[1, 0] * qx + Ai[1, 1] * qy)])
    else:
        t = _random_translation(rng, 0.7 * max_flow)
        Hc, Wc = H + 2 * margin, W + 2 * margin
        ctrl = rng.normal(size=(2, 4, 4)) * (0.3 * max_flow / 2)
        cy_idx = np.linspace(0, 3, Hc)
        cx_idx = np.linspace(0, 3, Wc)
        gy, gx = np.meshgrid(cy_idx, cx_idx, indexing="ij")
        field = np.stack([ndimage.map_coordinates(c, [gy, gx], order=3, mode="nearest") for c in ctrl])
        field += t[:, None, None]
        flow = field[:, margin:margin + H, margin:margin + W].copy()
        # invert y = x + f(x) by fixed point: g(y) = f(y - g(y))
        back = flow.copy()
        for _ in range(50):
            back = _sample(field, xs - back[0] + margin, ys - back[1] + margin)

    image1 = canvas[:, margin:margin + H, margin:margin + W].copy()
    image2 = _sample(canvas, xs - back[0] + margin, ys - back[1] + margin)
    tx, ty = xs + flow[0], ys + flow[1]
    valid = ((tx >= 0) & (tx <= W - 1) & (ty >= 0) & (ty <= H - 1))[None]
    return SyntheticSample(image1, np.clip(image2, -1, 1), flow, valid)


def make_sequence(seed: int, height: int, width: int, n_frames: int = 10,
                  max_flow: float = 6.0, drift: float = 0.3) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Frames of a texture under slowly varying global translation.

    Returns ``frames`` (``n_frames`` images) and ``flows`` (``n_frames - 1``
    ground-truth fields between consecutive frames).
    """
    rng = np.random.default_rng(seed)
    H, W = height, width
    velocity = _random_translation(rng, max_flow)
    velocities = []
    for _ in range(n_frames - 1):
        velocities.append(velocity.copy())
        velocity = velocity + rng.normal(scale=drift, size=2)
        norm = np.hypot(*velocity)
        if norm > max_flow:
            velocity *= max_flow / norm
    pos = np.concatenate([[np.zeros(2)], np.cumsum(velocities, axis=0)])
    margin = int(np.ceil(np.abs(pos).max())) + 8
    canvas = make_texture(rng, H + 2 * margin, W + 2 * margin)
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    frames = [np.clip(_sample(canvas, xs - p[0] + margin, ys - p[1] + margin), -1, 1) for p in pos]
    flows = [np.stack([np.full((H, W), v[0]), np.full((H, W), v[1])]) for v in velocities]
    return frames, flows


def stack_samples(samples: list[SyntheticSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([s.image1 for s in samples]), np.stack([s.image2 for s in samples]),
            np.stack([s.flow for s in samples]), np.stack([s.valid for s in samples]))


def sample_seed(seed: int, step: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, step, index]).generate_state(1)[0])
