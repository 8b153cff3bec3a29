"""The assembled flow network: encoders, correlation and recurrent updates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .correlation import CorrelationBlock
from .encoders import encode, encode_context, init_encoder
from .tensor import DimensionError, Tensor
from .update import (Step, UpdateState, init_update, iterate, mask_head, step_prefix,
                     upsample_bilinear, upsample_convex)


@dataclass
class FlowOutput:
    predictions: list[Tensor]          # full resolution, cropped to the input size
    steps: list[Step]                  # 1/8-resolution iterates (padded extents)
    pad: tuple[int, int, int, int]     # top, bottom, left, right


@dataclass
class FlowModel:
    """Named parameters, batch-norm buffers and the architecture config."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    notes: set = field(default_factory=set)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "FlowModel":
        config.validate()
        rng = np.random.default_rng(seed)
        m = cls(config)
        init_encoder(m.params, m.buffers, "fnet", config.features, rng)
        if config.update.use_context:
            init_encoder(m.params, m.buffers, "cnet", config.context, rng)
        ctx = config.context.context_split[1]
        ucfg = config.update
        if ucfg.tied_weights:
            init_update(m.params, "update", ucfg, config.lookup, ctx, rng)
        else:
            for k in range(ucfg.iterations_train):
                init_update(m.params, f"update.{k}", ucfg, config.lookup, ctx, rng)
        return m

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def count(self, prefix: str = "") -> int:
        return int(np.sum([p.size for k, p in self.params.items() if k.startswith(prefix)]))

    # ------------------------------------------------------------------

    @property
    def multiple(self) -> int:
        return 8 * 2 ** (self.config.lookup.levels - 1)

    def pad_images(self, img: np.ndarray) -> tuple[np.ndarray, tuple[int, int, int, int]]:
        """Reflect-pad ``[B,3,H,W]`` so both extents divide the pyramid's needs."""
        H, W = img.shape[-2:]
        m = self.multiple
        ph, pw = (-H) % m, (-W) % m
        pad = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
        if ph == 0 and pw == 0:
            return img, pad
        widths = ((0, 0), (0, 0), pad[:2], pad[2:])
        mode = "reflect" if max(pad[:2]) < H and max(pad[2:]) < W else "edge"
        return np.pad(img, widths, mode=mode), pad

    def forward(self, image1, image2, iters: int | None = None, flow_init=None,
                train: bool = False, upsample: str | None = None,
                all_steps: bool | None = None) -> FlowOutput:
        """Predict flow from ``image1`` to ``image2`` (``[B,3,H,W]`` in [-1, 1]).

        ``flow_init`` is an optional 1/8-resolution starting flow on the padded
        grid. Every iterate is upsampled when ``all_steps`` (the default while
        training); otherwise only the last one.
        """
        cfg = self.config
        i1 = image1.data if isinstance(image1, Tensor) else np.asarray(image1)
        i2 = image2.data if isinstance(image2, Tensor) else np.asarray(image2)
        if i1.shape != i2.shape:
            raise DimensionError(f"image extents differ: {i1.shape} vs {i2.shape}")
        if i1.ndim == 3:
            i1, i2 = i1[None], i2[None]
        H, W = i1.shape[-2:]
        p1, pad = self.pad_images(i1)
        p2, _ = self.pad_images(i2)
        B = p1.shape[0]

        both = encode(Tensor(np.concatenate([p1, p2])), self.params, self.buffers, "fnet",
                      cfg.features, train, self.notes)
        f1, f2 = both[:B], both[B:]
        h8, w8 = f1.shape[-2:]
        if cfg.update.use_context:
            hidden, context = encode_context(Tensor(p1), self.params, self.buffers, cfg.context,
                                             "cnet", train, self.notes)
        else:
            hidden, context = T.zeros((B, cfg.update.hidden_dim, h8, w8)), None

        corr = CorrelationBlock(f1, f2, cfg.lookup)
        if flow_init is None:
            f0 = T.zeros((B, 2, h8, w8))
        else:
            f0 = Tensor(np.asarray(flow_init.data if isinstance(flow_init, Tensor) else flow_init)
                        .reshape(B, 2, h8, w8))
        n = iters or (cfg.update.iterations_train if train else cfg.update.iterations_infer)
        steps = iterate(f0, corr, UpdateState(hidden, context), self.params, cfg.update, n)

        kind = upsample or cfg.update.upsample_kind
        if kind == "convex" and cfg.update.upsample_kind != "convex":
            raise ValueError("this model has no upsampling mask head; use bilinear")
        top, left = pad[0], pad[2]
        preds = []
        if all_steps is None:
            all_steps = train
        for k, s in enumerate(steps):
            if not all_steps and k < len(steps) - 1:
                continue
            if kind == "convex":
                mask = mask_head(s.hidden, self.params, step_prefix("update", cfg.update, k))
                up = upsample_convex(s.flow, mask, cfg.update.mask_temperature)
            else:
                up = upsample_bilinear(s.flow)
            if top or left or up.shape[-2] != H or up.shape[-1] != W:
                up = up[:, :, top:top + H, left:left + W]
            preds.append(up)
        return FlowOutput(preds, steps, pad)

    def predict(self, image1, image2, iters: int | None = None, flow_init=None,
                upsample: str | None = None) -> np.ndarray:
        with T.no_grad():
            out = self.forward(image1, image2, iters, flow_init, train=False, upsample=upsample)
        return out.predictions[-1].data
