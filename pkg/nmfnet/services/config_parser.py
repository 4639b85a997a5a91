"""
Run configuration files.

Grammar (one statement per line, `#` starts a comment):

    preset = cnmf_mix           # top-level network keys come first
    width_multiplier = 2
    groups = 4

    [train]
    lr0 = 0.001
    augment.hflip = true
    augment.color_jitter = 0.1, 0.1, 0.1

    [block 3]                   # 1-based; overrides fields of one block
    mix_1x1 = false

The preset supplies every block; top-level `nmf_iters` / `nmf_epsilon` apply
to all of them and `[block N]` sections override single fields. Unknown keys
and sections are rejected with the offending line number.
"""
import enum
import re
from dataclasses import dataclass, field
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from ..errors import ConfigError
from ..models.enums import BackwardEngine, GradMode, Preset
from ..models.network import block_specs, preset_config
from ..schemas.network import BlockConfig, NetworkConfig
from ..schemas.train import AugmentConfig, TrainConfig

DEFAULT_PRESET = Preset.CNMF_MIX

PRESET_KEYS = ("width_multiplier", "groups", "class_count", "backward", "grad_mode", "nmf_iters", "nmf_epsilon")
TOP_LEVEL_KEYS = ("preset", "input_shape") + PRESET_KEYS
TRAIN_KEYS = tuple(k for k in TrainConfig.model_fields if k != "augment") + tuple(
    f"augment.{k}" for k in AugmentConfig.model_fields
)
BLOCK_KEYS = tuple(BlockConfig.model_fields)

_SECTION = re.compile(r"^\[\s*(train|block\s+(\d+))\s*\]$")


class _TopLevel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: Preset = DEFAULT_PRESET
    input_shape: tuple[int, int, int] = (3, 28, 28)
    width_multiplier: int = 1
    groups: int = 1
    class_count: int = 10
    backward: BackwardEngine = BackwardEngine.APPROX
    grad_mode: GradMode = GradMode.DIRECT
    nmf_iters: Optional[int] = None
    nmf_epsilon: Optional[float] = None


@dataclass
class ParsedConfig:
    network: NetworkConfig
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class _Section:
    name: str
    line: int
    values: dict[str, Any] = field(default_factory=dict)
    lines: dict[str, int] = field(default_factory=dict)


def _value(raw: str) -> Any:
    # tuples are comma-separated; pydantic coerces the string items
    if "," in raw:
        return [item.strip() for item in raw.split(",")]
    return raw


def _split_sections(text: str) -> list[_Section]:
    sections = [_Section("", 0)]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            m = _SECTION.match(line)
            if not m:
                raise ConfigError(f"unknown section {line}", lineno)
            name = "train" if m.group(2) is None else f"block {int(m.group(2))}"
            if any(s.name == name for s in sections):
                raise ConfigError(f"duplicate section [{name}]", lineno)
            sections.append(_Section(name, lineno))
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        section = sections[-1]
        if key in section.values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        section.values[key] = _value(value)
        section.lines[key] = lineno
    return sections


def _check_keys(section: _Section, allowed: tuple[str, ...]) -> None:
    for key, lineno in section.lines.items():
        if key not in allowed:
            where = f"[{section.name}]" if section.name else "top level"
            raise ConfigError(f"unknown key {key!r} at {where}", lineno)


def _as_config_error(e: ValidationError, section: _Section) -> ConfigError:
    err = e.errors()[0]
    loc = [str(p) for p in err["loc"]]
    line = section.line or None
    # longest dotted prefix of the error location that names a key
    for n in range(len(loc), 0, -1):
        key = ".".join(loc[:n])
        if key in section.lines:
            line = section.lines[key]
            break
    field_name = ".".join(loc) or section.name
    return ConfigError(f"{field_name}: {err['msg']}", line)


def parse_config(text: str) -> ParsedConfig:
    sections = _split_sections(text)
    top = sections[0]
    _check_keys(top, TOP_LEVEL_KEYS)

    try:
        top_cfg = _TopLevel.model_validate(top.values)
        network = preset_config(top_cfg.preset, **top_cfg.model_dump(include=set(PRESET_KEYS)))
    except ValidationError as e:
        raise _as_config_error(e, top) from e

    train = TrainConfig()
    blocks = list(network.blocks)
    for section in sections[1:]:
        if section.name == "train":
            _check_keys(section, TRAIN_KEYS)
            plain = {k: v for k, v in section.values.items() if not k.startswith("augment.")}
            augment = {k[len("augment."):]: v for k, v in section.values.items() if k.startswith("augment.")}
            try:
                train = TrainConfig.model_validate({**plain, "augment": augment})
            except ValidationError as e:
                raise _as_config_error(e, section) from e
            continue

        _check_keys(section, BLOCK_KEYS)
        index = int(section.name.split()[1])
        if not 1 <= index <= len(blocks):
            raise ConfigError(f"block index {index} outside 1..{len(blocks)}", section.line)
        try:
            blocks[index - 1] = BlockConfig.model_validate({**blocks[index - 1].model_dump(), **section.values})
        except ValidationError as e:
            raise _as_config_error(e, section) from e

    data = network.model_dump()
    data["blocks"] = [b.model_dump() for b in blocks]
    data["input_shape"] = top_cfg.input_shape
    try:
        network = NetworkConfig.model_validate(data)
    except ValidationError as e:
        raise _as_config_error(e, top) from e
    block_specs(network)
    return ParsedConfig(network, train)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _dump(model: BaseModel, keys: tuple[str, ...]) -> list[str]:
    return [f"{k} = {_format(getattr(model, k))}" for k in keys]


def serialize_config(network: NetworkConfig, train: Optional[TrainConfig] = None) -> str:
    """Text that parse_config reads back to the same configuration."""
    train = train or TrainConfig()
    lines = [f"preset = {(network.preset or DEFAULT_PRESET).value}"]
    lines += _dump(network, ("width_multiplier", "groups", "input_shape", "class_count", "backward", "grad_mode"))
    lines += ["", "[train]"]
    lines += _dump(train, tuple(k for k in TRAIN_KEYS if not k.startswith("augment.")))
    lines += [f"augment.{k} = {_format(getattr(train.augment, k))}" for k in AugmentConfig.model_fields]
    for i, block in enumerate(network.blocks, start=1):
        lines += ["", f"[block {i}]"]
        lines += _dump(block, BLOCK_KEYS)
    return "\n".join(lines) + "\n"
