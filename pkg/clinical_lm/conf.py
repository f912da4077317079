"""
Run configuration: built-in defaults, key = value config files, and typed
config objects.

Precedence is CLI flags > config file > built-in defaults. The resolved flat
mapping is what every subcommand reads and what the run manifest echoes.
"""
import dataclasses
import logging
from typing import Any, Dict, List, Mapping, Optional, Tuple, Type, TypeVar

from clinical_lm import constants
from clinical_lm.errors import ConfigError
from clinical_lm.utils import _safe_bool

logger = logging.getLogger(__name__)

DEFAULT_SEED = 0
DEFAULT_PRESET = "tiny"
DEFAULT_PRECISION = "f32"
DEFAULT_TRANSPORT = "threads"
DEFAULT_OUT_DIR = "out"
DEFAULT_LOG_LEVEL = "INFO"

DEFAULT_BATCH_SIZE = 16
DEFAULT_EVAL_EVERY = 50
DEFAULT_MAX_STEPS = 2000
DEFAULT_PREFETCH = 2

DEFAULT_FINETUNE_STEPS = 300
DEFAULT_FINETUNE_BATCH_SIZE = 8
DEFAULT_FINETUNE_LR = 1e-3

DEFAULT_CORPUS_WORKERS = 4
DEFAULT_DEID_SOURCE_TAGS = "clinical"
DEFAULT_SAMPLE_FRACTION = 1.0

DEFAULT_FABRIC_TIMEOUT = 60.0
PRECISIONS = ("f32", "f64")
TRANSPORTS = ("threads", "sockets")
MASK_MODES = ("mask", "bert")
NER_MODES = ("unified", "per-category")

# Every key a config file may set. Value types come from these defaults;
# None means "no default, string when given".
DEFAULTS: Dict[str, Any] = {
    # run
    "seed": DEFAULT_SEED,
    "precision": DEFAULT_PRECISION,
    "out": DEFAULT_OUT_DIR,
    "log_level": DEFAULT_LOG_LEVEL,
    # model
    "preset": DEFAULT_PRESET,
    "num_layers": None,
    "hidden_size": None,
    "num_heads": None,
    "intermediate_size": None,
    "max_seq_len": None,
    "dropout": None,
    # tokenizer
    "vocab_size": constants.DEFAULT_VOCAB_SIZE,
    # corpus
    "deid_source_tags": DEFAULT_DEID_SOURCE_TAGS,
    "sample_fraction": DEFAULT_SAMPLE_FRACTION,
    "workers": DEFAULT_CORPUS_WORKERS,
    "rules": None,
    "abbreviations": None,
    # pretraining
    "batch_size": DEFAULT_BATCH_SIZE,
    "lr": constants.DEFAULT_LR,
    "warmup_steps": constants.DEFAULT_WARMUP_STEPS,
    "mask_rate": constants.DEFAULT_MASK_RATE,
    "mask_mode": "mask",
    "eval_every": DEFAULT_EVAL_EVERY,
    "patience": constants.DEFAULT_PATIENCE,
    "min_delta": constants.DEFAULT_MIN_DELTA,
    "val_fraction": constants.DEFAULT_VAL_FRACTION,
    "max_steps": DEFAULT_MAX_STEPS,
    "sentences_per_segment": 1,
    "wall_clock": True,
    "prefetch": DEFAULT_PREFETCH,
    # fine-tuning
    "finetune_steps": DEFAULT_FINETUNE_STEPS,
    "finetune_batch_size": DEFAULT_FINETUNE_BATCH_SIZE,
    "finetune_lr": DEFAULT_FINETUNE_LR,
    "ner_mode": "unified",
    "qa_max_question": constants.QA_MAX_QUESTION,
    "qa_window": constants.QA_WINDOW,
    "qa_stride": constants.QA_STRIDE,
    "qa_max_answer": constants.QA_MAX_ANSWER,
    # parallelism
    "model_parallel": 1,
    "data_parallel": 1,
    "transport": DEFAULT_TRANSPORT,
    "hosts": None,
    "fabric_timeout": DEFAULT_FABRIC_TIMEOUT,
    "shard_embeddings": False,
    "trace": None,
}

_CHOICES: Dict[str, Tuple[str, ...]] = {
    "precision": PRECISIONS,
    "transport": TRANSPORTS,
    "mask_mode": MASK_MODES,
    "ner_mode": NER_MODES,
}


def _coerce(key: str, value: Any) -> Any:
    """Coerce a raw value to the type of the key's default."""
    default = DEFAULTS.get(key)
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            text = str(value).strip().lower()
            if isinstance(value, bool) or text in ("1", "0", "true", "false",
                                                   "yes", "no", "on", "off"):
                return _safe_bool(value)
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for {key}: {value!r} ({e})") from e
    if key in ("num_layers", "hidden_size", "num_heads",
               "intermediate_size", "max_seq_len"):
        try:
            return int(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid value for {key}: {value!r}") from e
    if key == "dropout":
        try:
            return float(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid value for {key}: {value!r}") from e
    value = str(value).strip()
    choices = _CHOICES.get(key)
    if choices and value not in choices:
        raise ConfigError(
            f"invalid value for {key}: {value!r}; expected one of {choices}"
        )
    return value


def parse_config_text(text: str, source: str = "<string>") -> Dict[str, Any]:
    """
    Parse ``key = value`` lines. Blank lines and ``#`` comments are
    ignored; unknown keys and lines without ``=`` raise ConfigError.
    """
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read(), source=path)


def resolve_run_config(
    file_values: Optional[Mapping[str, Any]] = None,
    cli_values: Optional[Mapping[str, Any]] = None,
    defaults: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Merge layers with precedence CLI > file > defaults. CLI entries whose
    value is None are treated as not given.
    """
    resolved = dict(DEFAULTS if defaults is None else defaults)
    for key, value in (file_values or {}).items():
        resolved[key] = value
    for key, value in (cli_values or {}).items():
        if value is None:
            continue
        if key in DEFAULTS:
            value = _coerce(key, value)
        resolved[key] = value
    return resolved


def get_setting(config: Optional[Mapping[str, Any]], key: str) -> Any:
    """Value from a resolved config, else the built-in default."""
    if config is not None and config.get(key) is not None:
        return config[key]
    return DEFAULTS.get(key)


def split_list(value: Any) -> List[str]:
    """Comma-separated string (or list) to a list of stripped strings."""
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value if str(v).strip()]
    return [part.strip() for part in str(value).split(",") if part.strip()]


T = TypeVar("T")


def from_mapping(cls: Type[T], mapping: Optional[Mapping[str, Any]], **aliases) -> T:
    """
    Build dataclass ``cls`` from a flat config mapping. ``aliases`` maps a
    field name to the config key that feeds it when they differ.
    """
    mapping = mapping or {}
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = aliases.get(f.name, f.name)
        value = mapping.get(key)
        if value is None:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, bool):
            value = _safe_bool(value, default)
        elif isinstance(default, int):
            value = int(value)
        elif isinstance(default, float):
            value = float(value)
        kwargs[f.name] = value
    return cls(**kwargs)


@dataclasses.dataclass
class CorpusConfig:
    deid_source_tags: str = DEFAULT_DEID_SOURCE_TAGS
    sample_fraction: float = DEFAULT_SAMPLE_FRACTION
    workers: int = DEFAULT_CORPUS_WORKERS
    rules: Optional[str] = None
    abbreviations: Optional[str] = None
    seed: int = DEFAULT_SEED

    @property
    def deid_tags(self) -> List[str]:
        return split_list(self.deid_source_tags)

    @classmethod
    def from_mapping(cls, mapping):
        cfg = from_mapping(cls, mapping)
        if not 0.0 < cfg.sample_fraction <= 1.0:
            raise ConfigError(
                f"sample_fraction must be in (0, 1], got {cfg.sample_fraction}"
            )
        return cfg


@dataclasses.dataclass
class PretrainConfig:
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = constants.DEFAULT_LR
    warmup_steps: int = constants.DEFAULT_WARMUP_STEPS
    mask_rate: float = constants.DEFAULT_MASK_RATE
    mask_mode: str = "mask"
    eval_every: int = DEFAULT_EVAL_EVERY
    patience: int = constants.DEFAULT_PATIENCE
    min_delta: float = constants.DEFAULT_MIN_DELTA
    val_fraction: float = constants.DEFAULT_VAL_FRACTION
    max_steps: int = DEFAULT_MAX_STEPS
    sentences_per_segment: int = 1
    wall_clock: bool = True
    prefetch: int = DEFAULT_PREFETCH
    seed: int = DEFAULT_SEED

    @classmethod
    def from_mapping(cls, mapping):
        cfg = from_mapping(cls, mapping)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError(f"mask_rate must be in [0, 1], got {self.mask_rate}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(
                f"val_fraction must be in [0, 1), got {self.val_fraction}"
            )
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        for name in ("batch_size", "eval_every", "patience", "max_steps",
                     "sentences_per_segment"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclasses.dataclass
class FinetuneConfig:
    steps: int = DEFAULT_FINETUNE_STEPS
    batch_size: int = DEFAULT_FINETUNE_BATCH_SIZE
    lr: float = DEFAULT_FINETUNE_LR
    warmup_steps: int = 0
    ner_mode: str = "unified"
    seed: int = DEFAULT_SEED

    @classmethod
    def from_mapping(cls, mapping):
        cfg = from_mapping(
            cls,
            mapping,
            steps="finetune_steps",
            batch_size="finetune_batch_size",
            lr="finetune_lr",
            warmup_steps="finetune_warmup_steps",
        )
        if cfg.ner_mode not in NER_MODES:
            raise ConfigError(f"ner_mode must be one of {NER_MODES}")
        if cfg.steps < 1 or cfg.batch_size < 1:
            raise ConfigError("finetune_steps and finetune_batch_size must be >= 1")
        return cfg


@dataclasses.dataclass
class QaWindowing:
    """
    Sliding-window layout for extractive QA, in tokens. Consecutive windows
    overlap by ``window - stride``.
    """

    max_question: int = constants.QA_MAX_QUESTION
    window: int = constants.QA_WINDOW
    stride: int = constants.QA_STRIDE
    max_answer: int = constants.QA_MAX_ANSWER

    @property
    def overlap(self) -> int:
        return self.window - self.stride

    @classmethod
    def from_mapping(cls, mapping):
        cfg = from_mapping(
            cls,
            mapping,
            max_question="qa_max_question",
            window="qa_window",
            stride="qa_stride",
            max_answer="qa_max_answer",
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.window <= 0:
            raise ConfigError(f"qa window must be > 0, got {self.window}")
        if not 0 < self.stride <= self.window:
            raise ConfigError(
                f"qa stride must be in (0, window={self.window}], got {self.stride}"
            )
        if self.max_question < 1 or self.max_answer < 1:
            raise ConfigError("qa max_question and max_answer must be >= 1")

    def fit(self, max_seq_len: int) -> "QaWindowing":
        """
        Shrink the window so [CLS] question [SEP] window [SEP] fits in
        ``max_seq_len``, keeping the overlap where possible. The question
        budget is cut first only when nothing else fits.
        """
        self.validate()
        question = min(self.max_question, max(max_seq_len - 4, 1))
        window = min(self.window, max_seq_len - question - 3)
        if window <= 0:
            raise ConfigError(
                f"max_seq_len {max_seq_len} leaves no room for a qa window"
            )
        stride = max(1, min(self.stride, window - self.overlap))
        fitted = QaWindowing(question, window, stride, self.max_answer)
        if fitted != self:
            logger.info(
                f"Fitted qa windowing to max_seq_len={max_seq_len}: "
                f"question={question} window={window} stride={stride}"
            )
        return fitted


@dataclasses.dataclass
class ParallelConfig:
    model_parallel: int = 1
    data_parallel: int = 1
    transport: str = DEFAULT_TRANSPORT
    hosts: Optional[str] = None
    fabric_timeout: float = DEFAULT_FABRIC_TIMEOUT
    shard_embeddings: bool = False
    trace: Optional[str] = None

    @property
    def world_size(self) -> int:
        return self.model_parallel * self.data_parallel

    @classmethod
    def from_mapping(cls, mapping):
        cfg = from_mapping(cls, mapping)
        if cfg.model_parallel < 1 or cfg.data_parallel < 1:
            raise ConfigError("model_parallel and data_parallel must be >= 1")
        if cfg.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}")
        if cfg.transport == "sockets" and cfg.world_size > 1 and not cfg.hosts:
            logger.info("No hosts file given; sockets transport uses loopback")
        return cfg
