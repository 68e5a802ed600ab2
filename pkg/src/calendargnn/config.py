"""Flat key = value configuration files and the training configuration.

Config files are UTF-8 text, one ``key = value`` pair per line, ``#``
comments, dotted names for nesting. The canonical serialized form (sorted
keys) is hashed into checkpoints so evaluation can refuse a mismatched
configuration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

TASKS = ("gender", "income", "age")
VARIANTS = ("full", "attn", "s-only", "minus-hour", "minus-week",
            "minus-weekday", "minus-spatial")


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_kv_file(path: str) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv_text(fh.read())


@dataclass
class TrainConfig:
    """Training protocol and model dimensions.

    Dimension defaults follow the reference setup: 256 for session and
    unit embeddings, 128 for pattern vectors. The attention variant sizes
    its unit embeddings at ``dims_pattern`` so the pooled interactive
    patterns concatenate to 2 * dims_pattern per time kind.
    """

    task: str = "gender"
    variant: str = "full"
    dims_item: int = 256
    dims_location: int = 256
    dims_session: int = 256
    dims_unit: int = 256
    dims_pattern: int = 128
    lr: float = 1e-4
    max_epochs: int = 100
    patience: int = 3
    batch_size: int = 32
    seeds: int = 5
    seed: int = 0
    split_seed: int = 0
    tz_offset_minutes: int = 0
    activation: str = "relu"
    data_dir: str = ""

    _KEYMAP = {
        "dims.item": "dims_item",
        "dims.location": "dims_location",
        "dims.session": "dims_session",
        "dims.unit": "dims_unit",
        "dims.pattern": "dims_pattern",
    }

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("dims_item", "dims_location", "dims_session", "dims_unit",
                     "dims_pattern", "max_epochs", "batch_size", "seeds"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @classmethod
    def _key_for(cls, field_name: str) -> str:
        for key, fname in cls._KEYMAP.items():
            if fname == field_name:
                return key
        return field_name

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        valid = {f.name: f.type for f in fields(cls) if not f.name.startswith("_")}
        for key, value in kv.items():
            fname = cls._KEYMAP.get(key, key)
            if fname not in valid:
                raise ValueError(f"unknown config key {key!r}")
            current = getattr(cls, fname)
            if isinstance(current, bool):
                kwargs[fname] = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                kwargs[fname] = int(value)
            elif isinstance(current, float):
                kwargs[fname] = float(value)
            else:
                kwargs[fname] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        return cls.from_mapping(parse_kv_file(path))

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            value = getattr(self, f.name)
            out[self._key_for(f.name)] = repr(value) if isinstance(value, float) else str(value)
        return out

    def to_text(self) -> str:
        kv = self.to_mapping()
        return "".join(f"{k} = {kv[k]}\n" for k in sorted(kv))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def with_overrides(self, **kwargs) -> "TrainConfig":
        current = {f.name: getattr(self, f.name) for f in fields(self)
                   if not f.name.startswith("_")}
        current.update(kwargs)
        return TrainConfig(**current)

    @property
    def unit_dim(self) -> int:
        """Effective unit-embedding width; the attention variant pools raw
        units, so their width must equal the pattern width."""
        return self.dims_pattern if self.variant == "attn" else self.dims_unit

    @property
    def user_dim(self) -> int:
        if self.variant == "attn":
            return 6 * self.dims_pattern
        if self.variant.startswith("minus-"):
            return 3 * self.dims_pattern
        return 4 * self.dims_pattern

    @property
    def num_classes(self) -> int | None:
        return {"gender": 2, "income": 10, "age": None}[self.task]
