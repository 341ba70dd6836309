"""Training configuration: dataclass defaults, config files, CLI overrides.

Config files are flat ``key = value`` text (``#`` starts a comment) whose
keys mirror the ``TrainingConfig`` field names.  Precedence is CLI flag
over config file over dataclass default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError

WEIGHTING_VARIANTS = ("average", "interval")
EMBEDDING_INITS = ("random", "tcomplex", "file")
OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainingConfig:
    """Hyperparameters for model construction and the training loop.

    The schedule defaults (two conv layers, train batch 32, validation
    batch 5, learning rate 4e-5 decayed by 0.4 every 10 epochs, score
    scale 30, prediction divisor 3, early-stopping patience 10) are the
    full-scale reference settings; desk-scale runs usually raise the
    learning rate and cap ``max_epochs``.
    """

    dim: int = 64
    question_dim: int = 64
    layers: int = 2
    basis_count: int = 8
    weighting: str = "average"
    gating_enabled: bool = True
    prediction_divisor: float = 3.0
    score_scale: float = 30.0

    batch_size_train: int = 32
    batch_size_valid: int = 5
    learning_rate: float = 4e-5
    lr_decay_factor: float = 0.4
    lr_decay_every_epochs: int = 10
    max_epochs: int = 50
    patience: int = 10
    optimizer: str = "adam"

    embedding_init: str = "random"
    embedding_file: str = ""
    freeze_embeddings: bool = False
    tcomplex_epochs: int = 20
    tcomplex_learning_rate: float = 0.05
    tcomplex_batch_size: int = 512

    seed: int = 13
    top_k: int = 10

    def validate(self) -> "TrainingConfig":
        if self.dim <= 0 or self.question_dim <= 0:
            raise ConfigError("embedding dimensions must be positive")
        if self.dim % 2 != 0:
            raise ConfigError("dim must be even (paired real/imaginary halves during pretraining)")
        if self.layers <= 0:
            raise ConfigError("layers must be positive")
        if self.basis_count <= 0:
            raise ConfigError("basis_count must be positive")
        if self.weighting not in WEIGHTING_VARIANTS:
            raise ConfigError(f"weighting must be one of {WEIGHTING_VARIANTS}, got {self.weighting!r}")
        if self.embedding_init not in EMBEDDING_INITS:
            raise ConfigError(f"embedding_init must be one of {EMBEDDING_INITS}, got {self.embedding_init!r}")
        if self.embedding_init == "file" and not self.embedding_file:
            raise ConfigError("embedding_init = file requires embedding_file")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.prediction_divisor <= 0:
            raise ConfigError("prediction_divisor must be positive")
        if self.score_scale <= 0:
            raise ConfigError("score_scale must be positive")
        if self.batch_size_train <= 0 or self.batch_size_valid <= 0:
            raise ConfigError("batch sizes must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.lr_decay_factor <= 1):
            raise ConfigError("lr_decay_factor must be in (0, 1]")
        if self.lr_decay_every_epochs <= 0:
            raise ConfigError("lr_decay_every_epochs must be positive")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be non-negative")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.tcomplex_epochs < 0:
            raise ConfigError("tcomplex_epochs must be non-negative")
        if self.top_k < 3:
            raise ConfigError("top_k must be at least 3")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def learning_rate_for_epoch(self, epoch: int) -> float:
        """Learning rate in force during 1-based training epoch ``epoch``."""
        if epoch < 1:
            raise ConfigError("training epochs are numbered from 1")
        decays = (epoch - 1) // self.lr_decay_every_epochs
        return self.learning_rate * (self.lr_decay_factor**decays)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainingConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    text = raw.strip()
    if kind == "bool":
        lowered = text.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {name!r} expects a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {name!r} expects {kind}, got {raw!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines into a field dict."""
    values: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{line_no}: unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config(path=None, overrides: dict | None = None) -> TrainingConfig:
    """Build a validated config from defaults, an optional file, then overrides."""
    values: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as handle:
            values.update(parse_config_text(handle.read(), source=str(path)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return TrainingConfig(**values).validate()
