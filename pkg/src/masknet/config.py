"""Experiment configuration and its line-based text format.

One setting per line, ``section.key = value`` with JSON values::

    model.mode = "masknet"
    model.squeeze_ratio = 8
    data.held_out_accents = [4, 5]
    optimizer.lr = 0.001
    epochs = 30

Bare words are read as strings, so ``model.mode = grl`` also works.
``#`` starts a comment line.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace

from .errors import ContractError, FormatError
from .model import BlockSpec, ModelConfig
from .synth import DataConfig


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ContractError(f"optimizer.kind must be 'adam' or 'sgd', got {self.kind!r}")
        if self.lr <= 0:
            raise ContractError("optimizer.lr must be > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 30
    batch_size: int = 32
    eval_beam_width: int = 512
    validation_fraction: float = 0.1
    probe_l2: float = 1e-3
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if self.eval_beam_width < 1:
            raise ContractError("eval_beam_width must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ContractError("validation_fraction must lie in [0, 1)")
        if self.model.input_features != self.data.input_features:
            raise ContractError(
                f"model.input_features={self.model.input_features} but the data has "
                f"{self.data.input_features} channels"
            )
        if self.model.vocab_size != self.data.vocab_size:
            raise ContractError("model.vocab_size must equal data.vocab_size")
        if self.model.has_discriminator and self.model.num_nuisance_classes < self.data.num_accents:
            raise ContractError("model.num_nuisance_classes must cover every accent")

    def with_seed(self, seed):
        """Same experiment with model init, data, and batch order all re-seeded."""
        return replace(self, seed=seed, model=replace(self.model, seed=seed), data=replace(self.data, seed=seed))

    def with_mode(self, mode):
        return replace(self, model=replace(self.model, mode=mode))


_SECTIONS = {"model": ModelConfig, "data": DataConfig, "optimizer": OptimizerConfig}


def _parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if text in ("True", "False"):
            return text == "True"
        return text


def parse_config_text(text, base=None):
    """Apply ``key = value`` lines on top of ``base`` (defaults if None)."""
    base = base or ExperimentConfig()
    top, sections = {}, {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        value = _parse_value(value)
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise FormatError(f"config line {lineno}: unknown section {section!r}")
            known = {f.name for f in dataclasses.fields(_SECTIONS[section])}
            if name not in known:
                raise FormatError(f"config line {lineno}: unknown key {key!r}")
            sections[section][name] = value
        else:
            known = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS)
            if key not in known:
                raise FormatError(f"config line {lineno}: unknown key {key!r}")
            top[key] = value
    if "encoder_blocks" in sections["model"]:
        sections["model"]["encoder_blocks"] = tuple(
            BlockSpec(**b) if isinstance(b, dict) else BlockSpec(*b) for b in sections["model"]["encoder_blocks"]
        )
    if "held_out_accents" in sections["data"]:
        sections["data"]["held_out_accents"] = tuple(sections["data"]["held_out_accents"])
    parts = {name: replace(getattr(base, name), **vals) for name, vals in sections.items()}
    # model dimensions follow the data unless set explicitly
    derived = {
        "input_features": parts["data"].input_features,
        "vocab_size": parts["data"].vocab_size,
        "num_nuisance_classes": parts["data"].num_accents,
    }
    derived = {k: v for k, v in derived.items() if k not in sections["model"]}
    parts["model"] = replace(parts["model"], **derived)
    return replace(base, **parts, **top)


def parse_data_config(text):
    """Read only the ``data.*`` lines (the sidecar written next to a saved dataset)."""
    vals = {}
    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("data.") and "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            vals[key[len("data."):]] = _parse_value(value)
    return DataConfig(**vals)


def _encode(value):
    if isinstance(value, tuple) and value and isinstance(value[0], BlockSpec):
        value = [dataclasses.asdict(b) for b in value]
    elif isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)


def dump_config(cfg):
    """Canonical text: one sorted ``key = value`` line per field.

    ``cfg`` is an ExperimentConfig or a dict mapping a section name to a
    section dataclass.
    """
    lines = []
    if isinstance(cfg, ExperimentConfig):
        for f in sorted(dataclasses.fields(cfg), key=lambda f: f.name):
            if f.name not in _SECTIONS:
                lines.append(f"{f.name} = {_encode(getattr(cfg, f.name))}")
        sections = {name: getattr(cfg, name) for name in _SECTIONS}
    else:
        sections = cfg
    for name in sorted(sections):
        sec = sections[name]
        for f in sorted(dataclasses.fields(sec), key=lambda f: f.name):
            lines.append(f"{name}.{f.name} = {_encode(getattr(sec, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
