"""Encoder hyperparameters, named presets and the closed-form size."""
import dataclasses
import logging
from typing import Any, Dict, List, Mapping, Optional, Tuple

from clinical_lm.constants import DEFAULT_VOCAB_SIZE
from clinical_lm.errors import ConfigError
from clinical_lm.static.load import get_presets

logger = logging.getLogger(__name__)

DEFAULT_MAX_SEQ_LEN = 512
DEFAULT_TYPE_VOCAB = 2
DEFAULT_DROPOUT = 0.1
_MODEL_FIELDS = (
    "num_layers",
    "hidden_size",
    "num_heads",
    "intermediate_size",
    "vocab_size",
    "max_seq_len",
    "type_vocab",
    "dropout",
)


@dataclasses.dataclass
class ModelConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    intermediate_size: int = 0
    vocab_size: int = DEFAULT_VOCAB_SIZE
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN
    type_vocab: int = DEFAULT_TYPE_VOCAB
    dropout: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if not self.intermediate_size:
            self.intermediate_size = 4 * self.hidden_size
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "hidden_size", "num_heads",
                     "intermediate_size", "vocab_size", "type_vocab"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_seq_len < 2:
            raise ConfigError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not divisible by "
                f"num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        unknown = set(data) - set(_MODEL_FIELDS)
        if unknown:
            raise ConfigError(f"unknown model config fields {sorted(unknown)}")
        return cls(**dict(data))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def preset_names() -> List[str]:
    return sorted(get_presets())


def preset_config(name: str, **overrides) -> ModelConfig:
    """
    ModelConfig for a named preset; ``overrides`` that are None are ignored.
    """
    presets = get_presets()
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; choose from {preset_names()}")
    fields = {k: v for k, v in presets[name].items() if k in _MODEL_FIELDS}
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_dict(fields)


def model_config_from_run(config: Mapping[str, Any], vocab_size: int) -> ModelConfig:
    """Preset plus per-field overrides from a resolved run config."""
    overrides = {k: config.get(k) for k in _MODEL_FIELDS if k != "vocab_size"}
    return preset_config(
        str(config.get("preset") or "tiny"), vocab_size=vocab_size, **overrides
    )


def reference_params(name: str) -> Optional[int]:
    return get_presets().get(name, {}).get("reference_params")


def nearest_preset(cfg: ModelConfig) -> Tuple[str, bool]:
    """(closest preset by layers/hidden/heads, exact match)."""
    best = None
    for name, fields in sorted(get_presets().items()):
        key = (fields["num_layers"], fields["hidden_size"], fields["num_heads"])
        exact = key == (cfg.num_layers, cfg.hidden_size, cfg.num_heads)
        distance = sum(
            abs(a - b) / max(a, b)
            for a, b in zip(key, (cfg.num_layers, cfg.hidden_size, cfg.num_heads))
        )
        if exact:
            return name, True
        if best is None or distance < best[1]:
            best = (name, distance)
    return best[0], False


def count_params(cfg: ModelConfig) -> int:
    """
    Encoder scalars by closed form: embeddings (word, position, segment,
    layer norm), per-layer attention and FFN with their layer norms, and
    the pooler. The MLM output is tied to the word embedding.
    """
    h = cfg.hidden_size
    i = cfg.intermediate_size
    embeddings = (cfg.vocab_size + cfg.max_seq_len + cfg.type_vocab) * h + 2 * h
    attention = 4 * (h * h + h) + 2 * h
    ffn = (h * i + i) + (i * h + h) + 2 * h
    pooler = h * h + h
    return embeddings + cfg.num_layers * (attention + ffn) + pooler
