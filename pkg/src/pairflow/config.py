"""Dataclass configs and the plain-text ``section.key = value`` format."""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class EncoderConfig:
    out_dim: int = 64
    widths: tuple[int, int, int] = (32, 48, 64)
    norm_kind: str = "instance"          # instance | batch | none
    block_kind: str = "residual"         # residual | bottleneck
    context_split: tuple[int, int] | None = None  # (hidden, context) for the context encoder

    def validate(self, prefix: str) -> None:
        if self.norm_kind not in ("instance", "batch", "none"):
            raise ConfigError(f"{prefix}.norm_kind", f"unknown norm {self.norm_kind!r}")
        if self.block_kind not in ("residual", "bottleneck"):
            raise ConfigError(f"{prefix}.block_kind", f"unknown block {self.block_kind!r}")
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ConfigError(f"{prefix}.widths", "need three positive stage widths")
        if self.block_kind == "bottleneck" and min(self.widths) < 4:
            raise ConfigError(f"{prefix}.widths", "bottleneck blocks need widths >= 4")
        if self.context_split is not None and sum(self.context_split) != self.out_dim:
            raise ConfigError(f"{prefix}.context_split", f"{self.context_split} does not sum to out_dim={self.out_dim}")


@dataclass
class LookupConfig:
    radius: int = 4
    levels: int = 4
    grid: str = "square"                 # square | diamond
    scale: str = "inv_sqrt_dim"          # inv_sqrt_dim | none
    mode: str = "pyramid"                # pyramid | ondemand

    def offsets(self) -> list[tuple[int, int]]:
        """(dx, dy) sample offsets, row-major (dy outer, dx inner)."""
        r = self.radius
        out = []
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if self.grid == "diamond" and abs(dx) + abs(dy) > r:
                    continue
                out.append((dx, dy))
        return out

    @property
    def channels(self) -> int:
        return self.levels * len(self.offsets())

    def validate(self, prefix: str = "lookup") -> None:
        if self.radius < 0:
            raise ConfigError(f"{prefix}.radius", "must be >= 0")
        if self.levels < 1:
            raise ConfigError(f"{prefix}.levels", "must be >= 1")
        if self.grid not in ("square", "diamond"):
            raise ConfigError(f"{prefix}.grid", f"unknown grid {self.grid!r}")
        if self.scale not in ("inv_sqrt_dim", "none"):
            raise ConfigError(f"{prefix}.scale", f"unknown scale {self.scale!r}")
        if self.mode not in ("pyramid", "ondemand"):
            raise ConfigError(f"{prefix}.mode", f"unknown mode {self.mode!r}")


@dataclass
class UpdateConfig:
    gru_kind: str = "conv3x3"            # conv3x3 | separable_1x5_5x1 | plain_conv_stack
    hidden_dim: int = 64
    corr_widths: tuple[int, int] = (64, 48)
    flow_widths: tuple[int, int] = (32, 16)
    append_raw_flow: bool = True
    use_context: bool = True
    head_dim: int = 64
    upsample_kind: str = "convex"        # convex | bilinear
    mask_dim: int = 64
    mask_temperature: float = 1.0
    iterations_train: int = 12
    iterations_infer: int = 32
    tied_weights: bool = True

    @property
    def motion_dim(self) -> int:
        return self.corr_widths[1] + self.flow_widths[1] + (2 if self.append_raw_flow else 0)

    def validate(self, prefix: str = "update") -> None:
        if self.gru_kind not in ("conv3x3", "separable_1x5_5x1", "plain_conv_stack"):
            raise ConfigError(f"{prefix}.gru_kind", f"unknown kind {self.gru_kind!r}")
        if self.upsample_kind not in ("convex", "bilinear"):
            raise ConfigError(f"{prefix}.upsample_kind", f"unknown kind {self.upsample_kind!r}")
        if self.iterations_train < 1:
            raise ConfigError(f"{prefix}.iterations_train", "must be >= 1")
        if self.iterations_infer < 1:
            raise ConfigError(f"{prefix}.iterations_infer", "must be >= 1")


@dataclass
class ModelConfig:
    features: EncoderConfig = field(default_factory=EncoderConfig)
    context: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        out_dim=128, norm_kind="batch", context_split=(64, 64)))
    lookup: LookupConfig = field(default_factory=LookupConfig)
    update: UpdateConfig = field(default_factory=UpdateConfig)

    def validate(self) -> None:
        self.features.validate("model.features")
        self.context.validate("model.context")
        if self.context.context_split is None:
            raise ConfigError("model.context.context_split", "context encoder needs a (hidden, context) split")
        if self.context.context_split[0] != self.update.hidden_dim:
            raise ConfigError("model.context.context_split",
                              f"hidden part {self.context.context_split[0]} != update.hidden_dim {self.update.hidden_dim}")
        self.lookup.validate("model.lookup")
        self.update.validate("model.update")


@dataclass
class LossConfig:
    gamma: float = 0.8

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("loss.gamma", "must lie in (0, 1]")


@dataclass
class OptimConfig:
    lr: float = 4e-4
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip: float = 1.0
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("optim.steps", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("optim.batch_size", "must be >= 1")
        if self.clip <= 0:
            raise ConfigError("optim.clip", "must be > 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("optim.warmup_frac", "must lie in [0, 1)")


@dataclass
class AugmentPolicy:
    """Probabilities and ranges for the appendix-style augmentations.

    Defaults follow the FlyingChairs recipe; ``identity()`` disables all.
    """
    color_prob: float = 1.0              # chance to jitter at all
    asymmetric_color_prob: float = 0.2   # jitter each image independently
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.5 / 3.141592653589793
    spatial_prob: float = 0.8
    log2_scale: tuple[float, float] = (-0.2, 1.0)
    stretch_prob: float = 0.8
    log2_stretch: float = 0.2
    erase_prob: float = 0.5
    erase_count: tuple[int, int] = (1, 3)
    erase_size: tuple[int, int] = (6, 12)

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(color_prob=0.0, asymmetric_color_prob=0.0, spatial_prob=0.0,
                   stretch_prob=0.0, erase_prob=0.0)


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    motion_kind: str = "smooth_random_field"
    max_flow: float = 8.0
    augment: bool = False
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)

    def validate(self) -> None:
        if self.motion_kind not in ("constant_translation", "affine", "smooth_random_field"):
            raise ConfigError("data.motion_kind", f"unknown motion {self.motion_kind!r}")
        if self.height % 8 or self.width % 8:
            raise ConfigError("data.height", "training crops must be multiples of 8")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    val_every: int = 250
    val_samples: int = 16
    val_iters: int = 12
    val_seed: int = 10_000

    def validate(self) -> None:
        self.model.validate()
        self.optim.validate()
        self.loss.validate()
        self.data.validate()


# --------------------------------------------------------------------------
# flat key/value views


def flatten(cfg, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, current, value):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        if isinstance(value, int) and value in (0, 1):
            return bool(value)
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple) or (current is None and isinstance(value, (tuple, list))):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(key, f"expected a tuple, got {value!r}")
        return tuple(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if current is None and value is None:
        return None
    raise ConfigError(key, f"cannot assign {value!r}")


def set_key(cfg, key: str, value) -> None:
    parts = key.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, p):
            raise ConfigError(key, "unknown key")
        obj = getattr(obj, p)
    leaf = parts[-1]
    names = {f.name for f in dataclasses.fields(obj)} if dataclasses.is_dataclass(obj) else set()
    if leaf not in names or dataclasses.is_dataclass(getattr(obj, leaf)):
        raise ConfigError(key, "unknown key")
    setattr(obj, leaf, _coerce(key, getattr(obj, leaf), value))


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_kv(text: str) -> dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}", "empty key")
        out[key] = parse_value(value)
    return out


def format_kv(cfg) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in flatten(cfg).items())


def load_train_config(path: str | Path | None = None, overrides: dict[str, object] | None = None
                      ) -> tuple[TrainConfig, dict[str, str]]:
    """Defaults, then file values, then flag overrides. Returns the config and
    a key -> provenance map (``default`` | ``file`` | ``flag``)."""
    cfg = TrainConfig()
    prov = {k: "default" for k in flatten(cfg)}
    if path is not None:
        for k, v in parse_kv(Path(path).read_text()).items():
            set_key(cfg, k, v)
            prov[k] = "file"
    for k, v in (overrides or {}).items():
        set_key(cfg, k, v)
        prov[k] = "flag"
    cfg.validate()
    return cfg, prov


def model_config_from_kv(text: str) -> ModelConfig:
    cfg = TrainConfig()
    for k, v in parse_kv(text).items():
        if k.startswith("model."):
            set_key(cfg, k, v)
    cfg.model.validate()
    return cfg.model
