"""Model variants and per-stage layout."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "custom"
    base_dim: int = 64
    rank: int = 2
    depths: tuple[int, int, int, int] = (1, 1, 8, 6)
    heads: tuple[int, int, int, int] = (2, 4, 8, 16)
    group_size: int = 7
    image_size: tuple[int, int] = (224, 224)
    in_channels: int = 3
    num_classes: int = 1000
    drop_path_rate: float = 0.0
    mlp_ratio: int = 4
    # number of affine maps in the channel MLP: 2 = fc-GELU-fc, 3 = fc-GELU-fc-GELU-fc
    mlp_affines: int = 2

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(v) for v in self.depths))
        object.__setattr__(self, "heads", tuple(int(v) for v in self.heads))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        self.validate()

    def validate(self) -> None:
        h, w = self.image_size
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("depths and heads need exactly four entries")
        if any(v < 0 for v in self.depths) or any(v < 1 for v in self.heads):
            raise ConfigError(f"bad depths/heads {self.depths}/{self.heads}")
        if h % 32 or w % 32 or h <= 0 or w <= 0:
            raise ConfigError(f"image size {self.image_size} must be a positive multiple of 32")
        if self.base_dim < 8 or self.base_dim % 8:
            raise ConfigError(f"base_dim {self.base_dim} must be a positive multiple of 8")
        if self.rank < 1 or self.group_size < 1:
            raise ConfigError("rank and group_size must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must lie in [0, 1)")
        if self.mlp_affines not in (2, 3):
            raise ConfigError("mlp_affines must be 2 or 3")
        if self.num_classes < 1 or self.in_channels < 1 or self.mlp_ratio < 1:
            raise ConfigError("num_classes, in_channels and mlp_ratio must be positive")

    def stage_hw(self, i: int) -> tuple[int, int]:
        h, w = self.image_size
        return h // 4 // 2 ** i, w // 4 // 2 ** i

    def stage_dim(self, i: int) -> int:
        return self.base_dim * 2 ** i

    def stage_group(self, i: int) -> int:
        """Group size used in stage ``i``: the largest common divisor of g and the stage grid."""
        return math.gcd(self.group_size, *self.stage_hw(i))

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        d["heads"] = list(self.heads)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


VARIANTS: dict[str, ModelConfig] = {
    "T": ModelConfig("T", 64, 2, (1, 1, 8, 6), (2, 4, 8, 16)),
    "S": ModelConfig("S", 96, 4, (2, 2, 6, 2), (3, 6, 12, 24)),
    "B": ModelConfig("B", 96, 4, (2, 2, 18, 2), (3, 6, 12, 24)),
    "L": ModelConfig("L", 128, 4, (2, 2, 18, 2), (4, 8, 16, 32)),
}

# Param (M) and GFLOPs columns as published.
PUBLISHED = {
    "T": {"params_m": 25.4, "gflops": 2.4},
    "S": {"params_m": 32.2, "gflops": 4.2},
    "B": {"params_m": 55.9, "gflops": 7.8},
    "L": {"params_m": 94.2, "gflops": 13.7},
}


def tiny_config(**kw) -> ModelConfig:
    """Desk-scale config used by gradient checks and quick training runs."""
    base = ModelConfig("tiny", base_dim=8, rank=2, depths=(1, 1, 1, 1), heads=(1, 2, 2, 4),
                       group_size=2, image_size=(32, 32), num_classes=4)
    return base.replace(**kw) if kw else base


def cifar_config(**kw) -> ModelConfig:
    """Reduced 32x32 config for the CIFAR-10 subset run (about 1.5 M parameters)."""
    base = ModelConfig("cifar", base_dim=32, rank=2, depths=(1, 1, 2, 1), heads=(1, 2, 4, 8),
                       group_size=2, image_size=(32, 32), num_classes=10)
    return base.replace(**kw) if kw else base


def variant(name: str, **kw) -> ModelConfig:
    try:
        cfg = VARIANTS[name.upper()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
    return cfg.replace(**kw) if kw else cfg


def is_canonical(cfg: ModelConfig) -> bool:
    """True when ``cfg`` is exactly a published variant at 224x224 with 1000 classes."""
    ref = VARIANTS.get(cfg.variant)
    if ref is None:
        return False
    return cfg.replace(mlp_affines=ref.mlp_affines) == ref


@dataclass(frozen=True)
class StagePlan:
    index: int
    hw: tuple[int, int]
    dim: int
    group: int
    heads: int
    modes: tuple[str, ...] = field(default=())


def stage_plans(cfg: ModelConfig) -> list[StagePlan]:
    plans = []
    for i in range(4):
        modes = tuple("LA" if j % 2 == 0 else "GA" for j in range(cfg.depths[i]))
        plans.append(StagePlan(i, cfg.stage_hw(i), cfg.stage_dim(i), cfg.stage_group(i),
                               cfg.heads[i], modes))
    return plans
