"""
Experiment configuration: a flat `key = value` file (comma-separated lists, `#`
comments) mapped onto the ExperimentConfig dataclass.

Example:
    seeds = 0, 1, 2
    sparsities = 0.75, 0.9   # one-shot targets
    variants = ce, kd, squarehead
    output_dir = runs
"""

import configparser
import dataclasses
import hashlib
import logging
import os
import typing
from dataclasses import dataclass, field, fields
from typing import List

from sparsekit.bench import MIN_REPS
from sparsekit.errors import ConfigError
from sparsekit.formats import VALUE_BITS

__all__ = ["ExperimentConfig",
           "DEFAULT_SPARSITIES",
           "load_config",
           "parse_config",
           "parse_shape"]

logger = logging.getLogger(__name__)

# compression ratios 2x, 3x, 4x, 5x, 6x, 7x, 8x and 10x
DEFAULT_SPARSITIES = [0.5, 0.67, 0.75, 0.8, 0.83, 0.86, 0.88, 0.9]

_SECTION = "experiment"
_PATH_KEYS = ("output_dir", "teacher_checkpoint")


@dataclass
class ExperimentConfig:
    # seeds
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    task_seed: int = 1234
    # model
    vocab: int = 32
    d_model: int = 64
    blocks: int = 2
    seq: int = 16
    prune_embeddings: bool = False
    prune_head: bool = False
    # task
    train_size: int = 4096
    val_size: int = 512
    test_size: int = 512
    finetune_size: int = 512
    # teacher
    teacher_epochs: int = 20
    teacher_lr: float = 0.3
    teacher_checkpoint: str = ""
    # sparse fine-tuning
    sparsities: List[float] = field(default_factory=lambda: list(DEFAULT_SPARSITIES))
    nm_patterns: List[str] = field(default_factory=list)
    variants: List[str] = field(default_factory=lambda: ["ce", "kd", "squarehead"])
    schedule: str = "oneshot"
    sparsity_levels: List[float] = field(default_factory=lambda: [0.5, 0.75])
    restart_lr: bool = True
    epochs: int = 16
    lr: float = 0.1
    warmup_steps: int = 20
    batch_size: int = 32
    weight_decay: float = 0.0
    lam: float = 1.0
    feat_lam: float = 8.0
    temperature: float = 1.0
    # benchmark
    bench_shape: str = ""
    bench_sparsities: List[float] = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9])
    bench_widths: List[str] = field(default_factory=lambda: ["fp32"])
    bench_reps: int = 30
    bench_warmup: int = 5
    threads: int = 1
    # output
    output_dir: str = "runs"

    def __post_init__(self):
        if any(not 0.0 <= s < 1.0 for s in self.sparsities):
            raise ConfigError(f"sparsities must lie in [0, 1), got {self.sparsities}")
        if self.schedule not in ("oneshot", "gradual"):
            raise ConfigError(f"schedule must be 'oneshot' or 'gradual', got {self.schedule!r}")
        for name in ("epochs", "teacher_epochs", "batch_size", "bench_reps", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.bench_warmup < 0:
            raise ConfigError(f"bench_warmup must be >= 0, got {self.bench_warmup}")
        if self.bench_shape:
            parse_shape(self.bench_shape)
            if self.bench_reps < MIN_REPS:
                raise ConfigError(f"bench_reps must be >= {MIN_REPS}, got {self.bench_reps}")
            unknown = [w for w in self.bench_widths if w not in VALUE_BITS]
            if unknown:
                raise ConfigError(f"unknown bench_widths {unknown}; use {sorted(VALUE_BITS)}")

    def to_text(self):
        """ Effective configuration in the file grammar, one key per line in field order. """
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                text = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def parse_shape(text):
    """ '4096x12288' -> (4096, 12288). """
    try:
        rows, cols = (int(part) for part in str(text).lower().split("x"))
    except ValueError:
        raise ConfigError(f"bad shape {text!r}; expected ROWSxCOLS") from None
    if rows < 1 or cols < 1:
        raise ConfigError(f"shape dimensions must be positive, got {text!r}")
    return rows, cols


def _coerce(name, kind, text):
    try:
        if kind is bool:
            lowered = text.strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if typing.get_origin(kind) in (list, List):
            (item,) = typing.get_args(kind)
            return [item(part.strip()) for part in text.split(",") if part.strip()]
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {text!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config(text, base_dir=None, **overrides):
    """
    Parse the file grammar into an ExperimentConfig.

    INPUT:
        - text: file contents
        - base_dir: directory that relative path values are resolved against
        - overrides: field values applied on top of the file

    OUTPUT:
        - ExperimentConfig; unknown keys raise ConfigError
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                       interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    hints = typing.get_type_hints(ExperimentConfig)
    values = {}
    for key, raw in parser.items(_SECTION):
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, hints[key], raw)
    for key in overrides:
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    if base_dir is not None:
        for key in _PATH_KEYS:
            if values.get(key) and not os.path.isabs(values[key]):
                values[key] = os.path.normpath(os.path.join(base_dir, values[key]))
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, **overrides):
    """ Read a config file (None gives the defaults); paths resolve against its directory. """
    if path is None:
        return parse_config("", **overrides)
    with open(path) as f:
        text = f.read()
    config = parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)), **overrides)
    logger.debug("loaded config %s (hash %s)", path, config.config_hash()[:12])
    return config
