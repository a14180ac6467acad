"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: str = "dele"  # "r2net" or "dele"

    # encoder
    d_p: int = 64
    d_ff: int = 128
    layers: int = 2
    heads: int = 2
    n_max: int = 64
    mix_layers: int = 2  # top layers entering the weighted sum; 0 means all
    layer_mix: str = "softmax"  # "softmax" or "raw"
    use_positions: bool = True
    kernel_sizes: tuple[int, ...] = (1, 2, 3)

    # heads
    d_m: int = 300
    d_a: int = 100
    d_2: int = 300
    d_3: int = 200

    # losses
    eta: float = 0.5
    margin: float = 0.2
    r2_aux_loss: str = "triplet"  # "triplet" or "nt_xent"
    use_local_encoder: bool = True
    delta: float = 0.1
    mu: float = 0.1
    tau: float = 0.1
    ntxent_ze_negatives: bool = False
    mutual_interaction: bool = True
    classifier_input: str = "hs"  # "hs" or "he"
    freeze_descriptions: bool = False

    # optimisation
    lr1: float = 1e-3
    lr2: float = 1e-3
    lr_max: float = 1.0
    lr_min: float = 1e-6
    warmup: float = 0.1
    weight_decay: float = 0.01
    epochs: int = 20
    batch_size: int = 24
    patience: int = 5
    seed: int = 0
    min_freq: int = 1

    # paths
    train_path: str = ""
    dev_path: str = ""
    test_path: str = ""
    labels_path: str = ""
    checkpoint_path: str = ""

    def validate(self) -> "TrainConfig":
        if self.model not in ("r2net", "dele"):
            raise ConfigError(f"model must be r2net or dele, got {self.model!r}")
        if self.batch_size < 6 or self.batch_size % 6:
            raise ConfigError(f"batch_size must be a positive multiple of 6, got {self.batch_size}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0.0 <= self.warmup <= 1.0:
            raise ConfigError(f"warmup must lie in [0, 1], got {self.warmup}")
        if self.tau <= 0 or self.margin <= 0:
            raise ConfigError("tau and margin must be positive")
        if self.delta < 0 or self.mu < 0:
            raise ConfigError("delta and mu must be non-negative")
        if self.d_p % self.heads:
            raise ConfigError(f"d_p={self.d_p} is not divisible by heads={self.heads}")
        if not self.kernel_sizes or min(self.kernel_sizes) < 1:
            raise ConfigError(f"kernel sizes must be >= 1, got {self.kernel_sizes}")
        if self.mix_layers < 0 or self.mix_layers > self.layers:
            raise ConfigError(f"mix_layers must lie in [0, layers], got {self.mix_layers}")
        if self.layer_mix not in ("softmax", "raw"):
            raise ConfigError(f"layer_mix must be softmax or raw, got {self.layer_mix!r}")
        if self.r2_aux_loss not in ("triplet", "nt_xent"):
            raise ConfigError(f"r2_aux_loss must be triplet or nt_xent, got {self.r2_aux_loss!r}")
        if self.classifier_input not in ("hs", "he"):
            raise ConfigError(f"classifier_input must be hs or he, got {self.classifier_input!r}")
        if self.n_max < 3:
            raise ConfigError("n_max must be at least 3")
        if self.epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")
        return self

    @property
    def n_mix(self) -> int:
        return self.mix_layers or self.layers

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, kind, raw: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "tuple":
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


_KINDS = {
    f.name: ("tuple" if f.name == "kernel_sizes" else type(f.default))
    for f in fields(TrainConfig)
}


def parse_config(text: str, base_dir: Path | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are errors.

    Relative paths are resolved against ``base_dir`` when given.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KINDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, _KINDS[key], raw)
    cfg = TrainConfig(**values)
    if base_dir is not None:
        for key in ("train_path", "dev_path", "test_path", "labels_path", "checkpoint_path"):
            v = getattr(cfg, key)
            if v and not Path(v).is_absolute():
                setattr(cfg, key, str(base_dir / v))
    return cfg.validate()


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)
