"""
Config File Parser for ConvNova

Reads flat ``key = value`` config files. Keys carry a ``model.``, ``train.``
or ``synth.`` prefix naming the dataclass they set; unprefixed keys configure
the command itself.
"""

import os
import re
import typing
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Set, Tuple

from src.convnova_model import ModelConfig
from src.errors import ConfigError
from src.trainer import TrainConfig

COMMAND_KEYS = {
    "seed": int,
    "data": str,
    "corpus": str,
    "out": str,
    "task": str,
    "metrics": List[str],
    "lengths": List[int],
    "repeats": int,
    "fraction": float,
    "rf_length": int,
    "compare_scratch": bool,
}

SYNTH_KEYS = {
    "generator": str,
    "n": int,
    "length": int,
    "motif": str,
    "gap_min": int,
    "k": int,
    "vocab_size": int,
    "total_length": int,
}

COMMAND_DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "task": "sequence",
    "metrics": ["mcc", "f1", "top1", "auroc"],
    "lengths": [4096, 8192, 16384],
    "repeats": 5,
    "fraction": 0.15,
    "rf_length": 500,
    "compare_scratch": False,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    """A fully resolved configuration."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: Dict[str, Any] = field(default_factory=dict)
    command: Dict[str, Any] = field(default_factory=lambda: dict(COMMAND_DEFAULTS))
    explicit: Set[str] = field(default_factory=set)

    def to_dict(self) -> Dict[str, Any]:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "synth": dict(self.synth), "command": dict(self.command)}


class ConfigParser:
    """Parses and resolves flat key-value config files."""

    def __init__(self):
        """Initialize the config parser."""
        self.line_pattern = re.compile(r'^([A-Za-z_][\w.]*)\s*=\s*(.*)$')
        self.int_pattern = re.compile(r'^[+-]?\d+$')
        self.model_fields = {f.name: f.type for f in fields(ModelConfig)}
        self.train_fields = {f.name: f.type for f in fields(TrainConfig)}

    def parse_text(self, text: str, source: str = "<config>") -> Dict[str, str]:
        """
        Split config text into raw key/value strings.

        Args:
            text: Config file contents; '#' starts a comment, blank lines are ignored
            source: Name used in error messages

        Returns:
            Dictionary of key -> raw value in file order
        """
        values: Dict[str, str] = {}
        for line_number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            match = self.line_pattern.match(line)
            if not match:
                raise ConfigError(f"{source}:{line_number}: expected 'key = value', got {line!r}")
            key, value = match.group(1), match.group(2).strip()
            if key in values:
                raise ConfigError(f"{source}:{line_number}: duplicate key {key!r}")
            self.check_key(key)
            values[key] = value
        return values

    def parse_file(self, path: str) -> Dict[str, str]:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as handle:
            return self.parse_text(handle.read(), source=path)

    def check_key(self, key: str) -> None:
        """Reject keys that do not name a config field or command setting."""
        prefix, _, name = key.partition(".")
        known = (
            (prefix == "model" and name in self.model_fields)
            or (prefix == "train" and name in self.train_fields)
            or (prefix == "synth" and name in SYNTH_KEYS)
            or (not name and key in COMMAND_KEYS)
        )
        if not known:
            raise ConfigError(f"Unknown config key {key!r}")

    def resolve(self, raw: Dict[str, str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        """
        Build typed configs from raw values plus command-line overrides.

        Args:
            raw: Output of ``parse_text``/``parse_file``
            overrides: Already typed values (keys as in the file) that win over the file

        Returns:
            RunConfig
        """
        model_values: Dict[str, Any] = {}
        train_values: Dict[str, Any] = {}
        synth: Dict[str, Any] = {}
        command: Dict[str, Any] = dict(COMMAND_DEFAULTS)

        merged: Dict[str, Any] = dict(raw)
        for key, value in (overrides or {}).items():
            if value is not None:
                self.check_key(key)
                merged[key] = value

        for key, value in merged.items():
            prefix, _, name = key.partition(".")
            if prefix == "model" and name:
                model_values[name] = self.coerce(key, value, self.model_fields[name])
            elif prefix == "train" and name:
                train_values[name] = self.coerce(key, value, self.train_fields[name])
            elif prefix == "synth" and name:
                synth[name] = self.coerce(key, value, SYNTH_KEYS[name])
            else:
                command[key] = self.coerce(key, value, COMMAND_KEYS[key])

        if (overrides or {}).get("seed") is not None or "train.seed" not in merged:
            train_values["seed"] = command["seed"]
        return RunConfig(ModelConfig(**model_values), TrainConfig(**train_values), synth, command, set(merged))

    def load(self, path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        raw = self.parse_file(path) if path else {}
        return self.resolve(raw, overrides)

    def coerce(self, key: str, value: Any, kind: Any) -> Any:
        """Convert a raw string to the declared field type (typed values pass through)."""
        if not isinstance(value, str):
            return value
        origin, args = typing.get_origin(kind), typing.get_args(kind)
        if origin is typing.Union:
            if value.lower() in ("", "none"):
                return None
            kind = next(arg for arg in args if arg is not type(None))
            origin, args = typing.get_origin(kind), typing.get_args(kind)
        if origin in (list, List):
            return [self.coerce(key, part.strip(), args[0]) for part in value.split(",") if part.strip()]
        if kind is bool:
            if value.lower() in _TRUE:
                return True
            if value.lower() in _FALSE:
                return False
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        if kind is int:
            if not self.int_pattern.match(value):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            return int(value)
        if kind is float:
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{key} must be a number, got {value!r}")
        return value

    def validate_lengths(self, lengths: List[int]) -> bool:
        """True if the benchmark lengths are positive and strictly ascending."""
        return bool(lengths) and all(n >= 1 for n in lengths) and all(b > a for a, b in zip(lengths, lengths[1:]))

    def validate_fraction(self, fraction: float) -> bool:
        return 0 < fraction <= 1

    def to_text(self, config: RunConfig) -> str:
        """Serialize a RunConfig back to the file format (sorted keys)."""
        items: List[Tuple[str, Any]] = []
        items += [(f"model.{k}", v) for k, v in config.model.to_dict().items()]
        items += [(f"train.{k}", v) for k, v in config.train.to_dict().items()]
        items += [(f"synth.{k}", v) for k, v in config.synth.items()]
        items += [(k, v) for k, v in config.command.items() if v is not None]
        return "".join(f"{key} = {self._format(value)}\n" for key, value in sorted(items))

    @staticmethod
    def _format(value: Any) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, (list, tuple)):
            return ",".join(str(v) for v in value)
        if value is None:
            return "none"
        return str(value)

    def generate_output_name(self, config: ModelConfig, kind: str, extension: str = ".cnvn") -> str:
        """
        Suggested output filename encoding the architecture.

        Args:
            config: Model config
            kind: Run kind, e.g. 'pretrain' or 'finetune'
            extension: File extension

        Returns:
            Name like 'convnova_pretrain_d128_n5_k9_b4.cnvn'
        """
        variant = "" if config.variant == "dual_branch" else f"_{config.variant}"
        return (f"convnova_{kind}{variant}_d{config.hidden_dim}_n{config.n_gcb}"
                f"_k{config.kernel_size}_b{config.dilation_base}{extension}")
