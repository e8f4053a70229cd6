"""Run configuration: presets, ``key = value`` config files and override precedence."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .training import TrainConfig

# forced keys define the model family; tunable defaults may be overridden
PRESETS: dict[str, dict] = {
    "dgrec": {
        "forced": {"use_selection": True, "use_attention": True, "use_reweight": True},
        "defaults": {},
    },
    "lightgcn": {
        "forced": {"use_selection": False, "use_attention": False, "use_reweight": False},
        "defaults": {},
    },
    "mf-bpr": {
        "forced": {"layers": 0, "use_selection": False, "use_attention": False, "use_reweight": False},
        "defaults": {},
    },
    "popularity": {"forced": {}, "defaults": {}},
}

RUN_KEYS = {"preset": str, "split": str, "out": str, "interactions": str, "categories": str,
            "cutoffs": str}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(key: str, value):
    types = {**TrainConfig.field_types(), **RUN_KEYS}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    kind = types[key]
    try:
        if kind is bool:
            return _parse_bool(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value.strip()


def read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        key, value = (part.strip() for part in pair.split("=", 1))
        out[key] = coerce(key, value)
    return out


@dataclass
class RunConfig:
    train: TrainConfig
    preset: str = "dgrec"
    split: str | None = None
    out: str | None = None
    interactions: str | None = None
    categories: str | None = None
    cutoffs: tuple[int, ...] = (100, 300)
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"preset = {self.preset}"]
        for name in ("split", "out", "interactions", "categories"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name} = {value}")
        lines.append(f"cutoffs = {','.join(map(str, self.cutoffs))}")
        for f in fields(TrainConfig):
            lines.append(f"{f.name} = {getattr(self.train, f.name)}")
        return "\n".join(lines) + "\n"


def resolve(preset: str | None = None, file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Merge preset defaults < config file < flags, then apply the preset's forced keys.

    Setting a forced key to a conflicting value is an error.
    """
    file_values = dict(file_values or {})
    flag_values = {k: v for k, v in (flag_values or {}).items() if v is not None}
    name = flag_values.pop("preset", None) or preset or file_values.pop("preset", None) or "dgrec"
    file_values.pop("preset", None)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[name]
    merged = {**spec["defaults"], **file_values, **flag_values}
    for key, value in merged.items():
        coerce(key, value)
    for key, forced in spec["forced"].items():
        if key in merged and coerce(key, merged[key]) != forced:
            raise ConfigError(f"preset {name!r} requires {key} = {forced}, got {merged[key]}")
        merged[key] = forced

    train_names = {f.name for f in fields(TrainConfig)}
    train_kwargs = {k: coerce(k, v) for k, v in merged.items() if k in train_names}
    run_kwargs = {k: coerce(k, v) for k, v in merged.items() if k in RUN_KEYS}
    cutoffs = run_kwargs.pop("cutoffs", None)
    train = replace(TrainConfig(), **train_kwargs)
    try:
        train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig(train=train, preset=name, **run_kwargs)
    if cutoffs:
        cfg.cutoffs = parse_int_list(cutoffs)
    return cfg


def parse_int_list(text: str, minimum: int = 1) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or any(v < minimum for v in values):
        raise ConfigError(f"expected integers >= {minimum}, got {text!r}")
    return values
