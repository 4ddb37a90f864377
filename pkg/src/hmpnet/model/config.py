"""Declarative detector configuration with validation and JSON round-trip."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

STRIDES = (8, 16, 32)
LEVELS = ("P3", "P4", "P5")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 12
    input_size: int = 640
    stem_width: int = 16
    # P2, P3, P4, P5
    widths: tuple[int, ...] = (32, 64, 128, 256)
    repeats: tuple[int, ...] = (1, 2, 2, 1)
    neck_width: int = 64
    head_width: int = 64
    mcpc_kernels: tuple[int, ...] = (3, 5, 7, 9)
    use_hdm: bool = True
    use_mcpc: bool = True
    use_pws: bool = True
    dyn_experts: int = 4
    dyn_temperature: float = 30.0
    hdf_expand: int = 2
    gn_groups: int = 16

    @property
    def mcpc_groups(self) -> int:
        return len(self.mcpc_kernels)

    def validate(self) -> "ModelConfig":
        def fail(name, why):
            raise ConfigError(f"{name}: {why}")

        if self.num_classes < 1:
            fail("num_classes", "must be >= 1")
        if self.input_size < 32 or self.input_size % 32:
            fail("input_size", f"{self.input_size} is not a positive multiple of 32")
        if len(self.widths) != 4:
            fail("widths", "need four stage widths (P2..P5)")
        if len(self.repeats) != 4 or min(self.repeats) < 1:
            fail("repeats", "need four repeat counts >= 1")
        if self.stem_width % 2:
            fail("stem_width", "must be even")
        g = self.gn_groups
        for name, val in [("stem_width", self.stem_width), ("neck_width", self.neck_width),
                          ("head_width", self.head_width)] + [(f"widths[{i}]", w) for i, w in enumerate(self.widths)]:
            if val < 1 or val % g:
                fail(name, f"{val} not divisible by gn_groups={g}")
        if any(k % 2 == 0 or k < 1 for k in self.mcpc_kernels):
            fail("mcpc_kernels", "kernel sizes must be odd")
        if self.use_mcpc:
            p3, p4, p5 = self.widths[1:]
            n = self.neck_width
            for name, cin in [("neck P4 input", p5 + p4), ("neck P3 input", n + p3),
                              ("neck P4 output input", 2 * n), ("neck P5 input", n + p5)]:
                if cin % self.mcpc_groups:
                    fail("mcpc_kernels", f"{name} width {cin} not divisible by {self.mcpc_groups} groups")
        if self.dyn_experts < 1:
            fail("dyn_experts", "must be >= 1")
        if self.dyn_temperature <= 0:
            fail("dyn_temperature", "must be > 0")
        if self.hdf_expand < 1:
            fail("hdf_expand", "must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def toy_config(**changes) -> ModelConfig:
    """Width-reduced variant for desk-scale training at 160x160."""
    base = ModelConfig(num_classes=3, input_size=160, stem_width=16, widths=(32, 48, 64, 96),
                       repeats=(1, 1, 1, 1), neck_width=48, head_width=32, gn_groups=8)
    return replace(base, **changes).validate()
