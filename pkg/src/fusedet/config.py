"""Flat run configuration: `section.key = value` files plus CLI overrides.

Four sections map onto the frozen dataclasses they configure:

- model.*  -> detector.ModelConfig
- train.*  -> detector.TrainConfig
- data.*   -> data.SynthSpec
- run.*    -> RunSettings (paths, thresholds, resume switch)

Values are parsed by the target field's type. Tuples use commas
(`model.widths = 16,32,64,128`); anchor sets use WxH pairs with `;`
between levels (`model.anchors = 6x6,16x16;36x5,28x28`). Unknown keys
are rejected, never ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .data import SynthSpec
from .detector import ModelConfig, TrainConfig
from .errors import ConfigError


@dataclass(frozen=True)
class RunSettings:
    data_dir: str = "dataset"
    out_dir: str = "run"
    checkpoint: str = ""  # empty -> <out_dir>/model.fda
    conf_threshold: float = 0.25
    nms_iou: float = 0.45
    resume: bool = False

    def __post_init__(self):
        if not (0.0 < self.conf_threshold < 1.0):
            raise ConfigError(f"run.conf_threshold must be in (0,1), got {self.conf_threshold}")
        if not (0.0 < self.nms_iou < 1.0):
            raise ConfigError(f"run.nms_iou must be in (0,1), got {self.nms_iou}")

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "model.fda"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: SynthSpec
    run: RunSettings


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": SynthSpec,
    "run": RunSettings,
}

# keys that describe one invocation rather than the experiment; they stay
# out of checkpoint manifests so a resumed run matches an uninterrupted one
VOLATILE_KEYS = frozenset(
    {"run.data_dir", "run.out_dir", "run.checkpoint", "run.resume",
     "run.conf_threshold", "run.nms_iou"}
)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str) -> tuple:
    return tuple(int(p.strip()) for p in raw.split(",") if p.strip())


def _parse_anchors(raw: str) -> tuple:
    levels = []
    for part in raw.split(";"):
        pairs = []
        for token in part.split(","):
            token = token.strip()
            if not token:
                continue
            w, _, h = token.partition("x")
            pairs.append((float(w), float(h)))
        levels.append(tuple(pairs))
    return tuple(levels)


def _format_anchors(anchors) -> str:
    return ";".join(
        ",".join(f"{w:g}x{h:g}" for w, h in level) for level in anchors
    )


def _field_codec(section: str, f: dataclasses.Field):
    """(parse, format) pair for one dataclass field."""
    if f.name == "anchors":
        return _parse_anchors, _format_anchors
    if f.type in ("tuple", tuple):
        return _parse_int_tuple, lambda v: ",".join(str(x) for x in v)
    if f.type in ("bool", bool):
        return _parse_bool, lambda v: "true" if v else "false"
    if f.type in ("int", int):
        return int, str
    if f.type in ("float", float):
        return float, repr  # shortest string that parses back bit-equal
    if f.type in ("str", str):
        return lambda s: s, str
    raise AssertionError(f"no codec for {section}.{f.name}: {f.type}")


def _build_schema():
    schema = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            schema[f"{section}.{f.name}"] = (section, f.name) + _field_codec(section, f)
    return schema


SCHEMA = _build_schema()


def default_run_config() -> RunConfig:
    return RunConfig(ModelConfig(), TrainConfig(), SynthSpec(), RunSettings())


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """`key = value` lines to a {key: raw string} dict. Blank lines and
    `#` comments are skipped; anything else malformed is an error."""
    out: dict = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, eq, value = stripped.partition("=")
        if not eq:
            raise ConfigError(f"{origin}:{ln}: expected 'key = value', got {line!r}")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{ln}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}:{ln}: duplicate key {key!r}")
        out[key] = value
    return out


def resolve_config(
    file_text: Optional[str] = None,
    overrides: Optional[list] = None,
    origin: str = "<config>",
) -> RunConfig:
    """Defaults, then the file, then (key, value) overrides, last wins."""
    assignments: dict = {}
    if file_text is not None:
        assignments.update(parse_config_text(file_text, origin))
    for key, raw in overrides or []:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        assignments[key] = raw

    by_section: dict = {name: {} for name in SECTIONS}
    for key, raw in assignments.items():
        section, field_name, parse, _ = SCHEMA[key]
        try:
            by_section[section][field_name] = parse(raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e

    return RunConfig(
        **{name: cls(**by_section[name]) for name, cls in SECTIONS.items()}
    )


def serialize_run_config(cfg: RunConfig, include_volatile: bool = True) -> str:
    """Flat text that resolve_config() parses back to an equal config."""
    lines = []
    for key in sorted(SCHEMA):
        if not include_volatile and key in VOLATILE_KEYS:
            continue
        section, field_name, _, fmt = SCHEMA[key]
        value = getattr(getattr(cfg, section), field_name)
        lines.append(f"{key} = {fmt(value)}")
    return "\n".join(lines) + "\n"


def write_resolved_config(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "resolved.cfg"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_run_config(cfg))
    return path
