"""Flat dotted-key configuration: `key = value` lines, '#' comments.

Unknown keys are rejected; every key has a documented default (the DEFAULTS
table below is the single source of truth). Values are parsed to the type
of the default.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Bad configuration key, value, or file."""


def _shape(text: str):
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"expected CxHxW shape, got {text!r}")
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise ConfigError(f"expected CxHxW shape, got {text!r}")
    return parts


def _int_list(text: str):
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def _bool(text: str):
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected true/false, got {text!r}")


# key -> (default, parser)
DEFAULTS = {
    "seed": (0, int),
    "dataset.kind": ("synthetic", str),            # synthetic | idx
    "dataset.classes": (8, int),
    "dataset.per_class": (300, int),
    "dataset.test_per_class": (100, int),
    "dataset.noise_sigma": (0.08, float),
    "dataset.image": ((3, 32, 32), _shape),
    "dataset.idx_images": ("", str),               # idx kind: train files
    "dataset.idx_labels": ("", str),
    "dataset.idx_test_images": ("", str),
    "dataset.idx_test_labels": ("", str),
    "teachers.count": (2, int),
    "teachers.overlap": ((), _int_list),           # class ids shared by all teachers
    "net.conv_channels": ((16, 32, 48), _int_list),
    "net.kernel": (3, int),
    "net.hidden": ((128,), _int_list),
    "net.width_ratio": (0.65, float),
    "amalgam.mode": ("dfa", str),                  # pairwise | ifa | dfa
    "amalgam.ratio": (0.75, float),
    "fam.enabled": (True, _bool),
    "train.lr": (0.01, float),                     # teacher + distillation baseline
    "train.lr_ae": (0.5, float),                   # energy-normalized units
    "train.lr_layerwise": (0.5, float),
    "train.lr_joint": (0.3, float),
    "train.momentum": (0.9, float),
    "train.weight_decay": (5e-4, float),
    "train.epochs_teacher": (15, int),
    "train.epochs_ae": (10, int),
    "train.epochs_layerwise": (10, int),
    "train.epochs_joint": (30, int),
    "train.batch_size": (32, int),
    "kd.temperature": (4.0, float),
    "out.dir": ("out", str),
    "ablate.seeds": ((0, 1, 2), _int_list),
    "ablate.teacher_counts": ((2, 3, 4), _int_list),
    "ablate.classes_per_teacher": (4, int),
}


class Config:
    """Immutable typed view over the flat key table."""

    def __init__(self, values=None):
        self._values = {k: d for k, (d, _) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self._values[k] = v

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def items(self):
        return self._values.items()

    def with_overrides(self, **pairs) -> "Config":
        merged = dict(self._values)
        for k, v in pairs.items():
            if v is not None:
                merged[k] = v
        return Config(merged)


def parse_config(text: str) -> Config:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        _, parser = DEFAULTS[key]
        try:
            values[key] = parser(val)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}")
    return Config(values)


def load_config(path) -> Config:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def defaults_table() -> str:
    """The canonical defaults, formatted one key per line."""
    lines = []
    for key, (default, _) in DEFAULTS.items():
        if isinstance(default, tuple) and key == "dataset.image":
            shown = "x".join(str(v) for v in default)
        elif isinstance(default, tuple):
            shown = ",".join(str(v) for v in default)
        else:
            shown = str(default)
        lines.append(f"{key} = {shown}")
    return "\n".join(lines) + "\n"
