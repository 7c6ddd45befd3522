"""Run configuration loader based on TOML files with dotted keys."""

from __future__ import annotations

import copy
import os
import tomllib
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple, Union, get_args, get_origin, get_type_hints

import toml

from sam3unet.data import DataConfig
from sam3unet.encoder import EncoderConfig
from sam3unet.errors import ConfigError
from sam3unet.losses import LossConfig
from sam3unet.metrics import MetricsConfig
from sam3unet.paths import DEFAULT_CONFIG, DEFAULT_RUN_ROOT
from sam3unet.trainer import TrainConfig

CONFIG_ENV_VAR = "SAM3UNET_CONFIG_PATH"
DEVICES = ("auto", "cpu", "cuda")


@dataclass(frozen=True)
class RunSection:
    name: str = "toy"
    root: Path = DEFAULT_RUN_ROOT
    device: str = "auto"

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("run name must not be empty", key="name")
        if self.device not in DEVICES and not self.device.startswith("cuda:"):
            raise ConfigError(f"device must be one of {DEVICES}, got {self.device!r}", key="device")


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    run: RunSection = field(default_factory=RunSection)


SECTIONS: Dict[str, type] = {f.name: f.default_factory for f in fields(RunConfig)}  # type: ignore[misc]


def _default_config_path() -> Path:
    return DEFAULT_CONFIG


def _resolve_config_path(path: str | os.PathLike[str] | None) -> Path:
    if path is not None:
        candidate = Path(path)
    else:
        env_value = os.getenv(CONFIG_ENV_VAR)
        candidate = Path(env_value) if env_value else _default_config_path()
    resolved = candidate.expanduser().resolve()
    if not resolved.exists():
        raise FileNotFoundError(f"Configuration file not found: {resolved}")
    return resolved


@lru_cache(maxsize=4)
def _read_document(path: str) -> Dict[str, Any]:
    try:
        return tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"Cannot parse {path}: {exc}") from exc


def load_run_config(
    path: str | os.PathLike[str] | None = None,
    overrides: Iterable[Tuple[str, str]] = (),
) -> RunConfig:
    resolved_path = _resolve_config_path(path)
    document = copy.deepcopy(_read_document(str(resolved_path)))
    return parse_run_config(apply_overrides(document, overrides))


def loads_run_config(text: str) -> RunConfig:
    try:
        return parse_run_config(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"Cannot parse configuration text: {exc}") from exc


def parse_run_config(document: Mapping[str, Any]) -> RunConfig:
    for section, values in document.items():
        if section not in SECTIONS:
            raise ConfigError(f"Unknown configuration section '{section}'", key=section)
        if not isinstance(values, Mapping):
            raise ConfigError(f"'{section}' must hold dotted keys, got {values!r}", key=section)
    built = {name: _build_section(name, cls, document.get(name, {})) for name, cls in SECTIONS.items()}
    return RunConfig(**built)


def _build_section(section: str, cls: type, values: Mapping[str, Any]) -> Any:
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        dotted = f"{section}.{key}"
        if key not in known:
            raise ConfigError(f"Unknown configuration key '{dotted}'", key=dotted)
        kwargs[key] = _coerce(raw, hints[key], dotted)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        dotted = f"{section}.{exc.key}" if exc.key else section
        raise ConfigError(f"Invalid '{dotted}': {exc}", key=dotted) from exc


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if value is None or (isinstance(value, str) and value.lower() in ("", "none")):
            return None
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{key}' expects a list, got {value!r}", key=key)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"'{key}' expects {len(args)} values, got {len(value)}", key=key)
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint is Path:
        if isinstance(value, (str, Path)):
            return Path(value)
    else:  # pragma: no cover - every schema field uses one of the types above
        raise ConfigError(f"Unsupported schema type {hint!r} for '{key}'", key=key)
    raise ConfigError(
        f"'{key}' expects {getattr(hint, '__name__', hint)}, got {type(value).__name__} {value!r}",
        key=key,
    )


def parse_value(raw: str) -> Any:
    """TOML value syntax (numbers, booleans, quoted strings, lists); bare words stay strings."""

    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Iterable[Tuple[str, str]]) -> Dict[str, Any]:
    for dotted, raw in overrides:
        section, _, key = dotted.partition(".")
        if not section or not key or "." in key:
            raise ConfigError(f"Override '{dotted}' must look like 'section.key'", key=dotted)
        target = document.setdefault(section, {})
        if not isinstance(target, dict):
            raise ConfigError(f"Cannot override inside '{section}'", key=dotted)
        target[key] = parse_value(raw)
    return document


def _override_name(token: str) -> str | None:
    if not token.startswith("--"):
        return None
    name = token[2:].split("=", maxsplit=1)[0]
    return name if "." in name else None


def split_override_args(argv: Sequence[str]) -> Tuple[List[str], List[Tuple[str, str]]]:
    """Pull ``--section.key value`` / ``--section.key=value`` out of ``argv``.

    Overrides may sit anywhere among the command's own arguments; the value
    following a space-separated override is consumed with it. Returns the
    remaining arguments and the override pairs in command-line order.
    """

    rest: List[str] = []
    pairs: List[Tuple[str, str]] = []
    index = 0
    while index < len(argv):
        token = argv[index]
        name = _override_name(token)
        if name is None:
            rest.append(token)
        elif "=" in token:
            pairs.append((name, token.split("=", maxsplit=1)[1]))
        else:
            index += 1
            if index >= len(argv):
                raise ConfigError(f"Override '--{name}' needs a value", key=name)
            pairs.append((name, argv[index]))
        index += 1
    return rest, pairs


def parse_override_args(argv: Sequence[str]) -> List[Tuple[str, str]]:
    """Turn a list made only of override tokens into pairs."""

    rest, pairs = split_override_args(argv)
    if rest:
        raise ConfigError(f"Unrecognized argument '{rest[0]}'", key=rest[0].lstrip("-"))
    return pairs


def _plain(value: Any) -> Any:
    if isinstance(value, Path):
        return value.as_posix()
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def run_config_to_dict(cfg: RunConfig) -> Dict[str, Dict[str, Any]]:
    document: Dict[str, Dict[str, Any]] = {}
    for section in SECTIONS:
        values = getattr(cfg, section)
        document[section] = {
            f.name: _plain(getattr(values, f.name))
            for f in fields(values)
            if getattr(values, f.name) is not None
        }
    return document


def dumps_run_config(cfg: RunConfig) -> str:
    """Flat ``section.key = value`` document that parses back to ``cfg``."""

    lines = []
    for section, values in run_config_to_dict(cfg).items():
        for line in toml.dumps(values).splitlines():
            if line.strip():
                lines.append(f"{section}.{line}")
        lines.append("")
    return "\n".join(lines)


__all__ = [
    "CONFIG_ENV_VAR",
    "RunConfig",
    "RunSection",
    "apply_overrides",
    "dumps_run_config",
    "load_run_config",
    "loads_run_config",
    "parse_override_args",
    "split_override_args",
    "parse_run_config",
    "parse_value",
    "run_config_to_dict",
]
