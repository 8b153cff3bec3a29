"""Central finite-difference probes for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def sample_indices(shape: tuple, n: int, rng: np.random.Generator) -> list[tuple]:
    """Up to ``n`` distinct multi-indices into an array of ``shape``."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def fd_grad(fn: Callable[[], Tensor], t: Tensor, idx: tuple, eps: float = 1e-6) -> float:
    """d fn() / d t[idx] by central differences; ``fn`` must return a scalar."""
    orig = t.data[idx].copy()
    with no_grad():
        t.data[idx] = orig + eps
        up = fn().item()
        t.data[idx] = orig - eps
        down = fn().item()
    t.data[idx] = orig
    return (up - down) / (2 * eps)


def gradient_report(fn: Callable[[], Tensor], params: Sequence[Tensor], n_samples: int = 20,
                    eps: float = 1e-6, seed: int = 0, zero_tol: float | None = None) -> list[dict]:
    """Per-tensor comparison of analytic and central-difference gradients.

    Each entry holds the relative error ||a - n|| / (||n|| + 1e-8) over the
    sampled coordinates. With ``zero_tol`` set, a tensor whose sampled
    gradients are all below it in norm (both analytic and numeric) is flagged
    ``zero`` and gets error 0: its relative error would only measure
    finite-difference round-off, e.g. a bias feeding straight into a
    normalisation.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    fn().backward()
    out = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        idxs = sample_indices(p.shape, n_samples, rng)
        a = np.array([analytic[i] for i in idxs])
        n = np.array([fd_grad(fn, p, i, eps) for i in idxs])
        na, nn = float(np.linalg.norm(a)), float(np.linalg.norm(n))
        zero = zero_tol is not None and na < zero_tol and nn < zero_tol
        err = 0.0 if zero else float(np.linalg.norm(a - n) / (nn + 1e-8))
        out.append({"error": err, "samples": len(idxs), "zero": zero, "norm": nn})
    return out


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], n_samples: int = 20,
                    eps: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between analytic and numeric gradients.

    The error for each tensor is ||analytic - numeric|| / (||numeric|| + 1e-8)
    over the sampled coordinates.
    """
    return max(r["error"] for r in gradient_report(fn, params, n_samples, eps, seed))
