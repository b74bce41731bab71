'''Run configuration: built-in defaults < key = value file < command-line overrides.

    # example.cfg
    epochs = 50
    d_n = 32
    sigma_d = auto
    codebook = -1, -0.5, 0, 0.5, 1
'''
import dataclasses
import logging
import math
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Union

from .asc_graph import AUTO, DiscreteCodebook
from .exceptions import UnknownConfigKeyException, ValidationException
from .layers import ModelConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

PATH_KEYS = ("train_data", "val_data", "test_data", "checkpoint", "metrics", "templates", "out")
CODEBOOK_KEYS = ("codebook", "codebook_strict")
# derived from data, never set by hand
INTERNAL_MODEL_KEYS = ("codebook", "feature_mean", "feature_std")

_MODEL_DEFAULTS = ModelConfig()
_TRAIN_DEFAULTS = TrainConfig()


def _field_defaults(instance) -> Dict[str, Any]:
    return {f.name: getattr(instance, f.name) for f in dataclasses.fields(instance)}


MODEL_KEYS = {k: v for k, v in _field_defaults(_MODEL_DEFAULTS).items() if k not in INTERNAL_MODEL_KEYS}
TRAIN_KEYS = _field_defaults(_TRAIN_DEFAULTS)


def known_keys():
    return sorted(set(MODEL_KEYS) | set(TRAIN_KEYS) | set(PATH_KEYS) | set(CODEBOOK_KEYS))


def _parse_bool(key: str, text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValidationException(f"{key}: expected a boolean, got {text!r}.")


def coerce(key: str, value: Any) -> Any:
    '''Convert a raw value (usually text) to the type of key's default.'''
    if key not in known_keys():
        raise UnknownConfigKeyException(f"Unknown configuration key {key!r}.")
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if key in PATH_KEYS:
            return text or None
        if key == "codebook":
            return tuple(float(v) for v in text.split(",") if v.strip())
        if key == "codebook_strict":
            return _parse_bool(key, text)
        if key == "sigma_d":
            return AUTO if text == AUTO else float(text)
        default = MODEL_KEYS[key] if key in MODEL_KEYS else TRAIN_KEYS[key]
        if isinstance(default, bool):
            return _parse_bool(key, text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            number = float(text)
            if not math.isfinite(number):
                raise ValueError(text)
            return number
        return text
    except ValueError:
        raise ValidationException(f"{key}: cannot parse {text!r}.")


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    '''Parse key = value lines; '#' starts a comment, blank lines are skipped.'''
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationException(f"{source}:{number}: expected 'key = value', got {line!r}.")
        key, raw = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = coerce(key, raw)
        except UnknownConfigKeyException:
            raise UnknownConfigKeyException(f"{source}:{number}: unknown configuration key {key!r}.")
    return values


def read_config_file(path: Union[str, pathlib.Path]) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read(), str(path))


@dataclass
class RunConfig:
    '''Resolved settings of one CLI run.'''
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Dict[str, Optional[str]] = field(default_factory=lambda: {k: None for k in PATH_KEYS})
    explicit: Dict[str, Any] = field(default_factory=dict)

    def resolved(self) -> Dict[str, Any]:
        '''Flat view of every setting, for logging.'''
        values = {k: v for k, v in self.model.to_dict().items() if k not in ("feature_mean", "feature_std")}
        values.update(dataclasses.asdict(self.train))
        values.update(self.paths)
        return values

    def explicit_model_keys(self) -> Dict[str, Any]:
        return {k: v for k, v in self.explicit.items() if k in MODEL_KEYS or k in CODEBOOK_KEYS}


def load_run_config(path: Optional[Union[str, pathlib.Path]] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    '''Merge defaults, the optional config file and overrides (None values are ignored).'''
    values = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)

    model_values = {k: v for k, v in values.items() if k in MODEL_KEYS}
    if "codebook" in values or "codebook_strict" in values:
        base = DiscreteCodebook()
        codebook_values = values.get("codebook", base.values)
        model_values["codebook"] = DiscreteCodebook(values=codebook_values, unknown_index=len(codebook_values),
                                                    strict=values.get("codebook_strict", base.strict))
    train_values = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    paths = {k: values.get(k) for k in PATH_KEYS}

    run = RunConfig(model=ModelConfig(**model_values), train=TrainConfig(**train_values),
                    paths=paths, explicit=dict(values))
    logger.info("Resolved configuration: %s", ", ".join(f"{k}={v}" for k, v in sorted(run.resolved().items())))
    return run
