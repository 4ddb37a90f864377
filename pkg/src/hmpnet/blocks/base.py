"""Module container, leaf layers, and per-layer cost recording."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from ..tensor import Parameter, Tensor, default_dtype
from ..tensor import ops

_init = {"rng": np.random.default_rng(0)}


def seed_init(seed: int) -> None:
    """Reset the generator used for weight initialization."""
    _init["rng"] = np.random.default_rng(seed)


def init_normal(shape, std: float) -> np.ndarray:
    return (_init["rng"].standard_normal(shape) * std).astype(default_dtype())


def he_normal(shape, fan_in: int) -> np.ndarray:
    return init_normal(shape, np.sqrt(2.0 / fan_in))


# ----------------------------------------------------------- cost recording

@dataclass
class CostRow:
    path: str
    kind: str
    out_shape: tuple[int, ...]
    params: int
    macs: int
    # MACs grow with (spatial area) ** area_power: 0 for vectors, 1 for convs, 2 for attention
    area_power: int = 1


@dataclass
class CostRecorder:
    rows: list[CostRow] = field(default_factory=list)
    _seen: set[int] = field(default_factory=set)

    def add(self, module: "Module", kind: str, out_shape, macs: int, area_power: int = 1,
            params: int | None = None) -> None:
        if params is None:
            params = module.param_count()
        if id(module) in self._seen:
            params = 0
        self._seen.add(id(module))
        per_image = tuple(out_shape[1:])
        self.rows.append(CostRow(module.path, kind, per_image, int(params), int(macs), area_power))


_rec = threading.local()


class recording:
    """Context manager that collects CostRows from every leaf layer executed inside it."""

    def __init__(self):
        self.recorder = CostRecorder()

    def __enter__(self) -> CostRecorder:
        _rec.current = self.recorder
        return self.recorder

    def __exit__(self, *exc) -> None:
        _rec.current = None


def recorder() -> CostRecorder | None:
    return getattr(_rec, "current", None)


# ------------------------------------------------------------------- module

class Module:
    """Attribute-registered container of parameters and sub-modules."""

    path: str = ""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def _own_parameters(self):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "", _seen: set | None = None):
        seen = set() if _seen is None else _seen
        if id(self) in seen:
            return
        seen.add(id(self))
        yield prefix, self
        for key, child in self._children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key, seen)

    def named_parameters(self, prefix: str = ""):
        """Unique parameters with the path of their first occurrence."""
        seen: set[int] = set()
        for path, mod in self.named_modules(prefix):
            for key, p in mod._own_parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    yield (f"{path}.{key}" if path else key), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def bind_names(self, prefix: str = "") -> "Module":
        """Stamp module paths and parameter names from the attribute tree."""
        for path, mod in self.named_modules(prefix):
            mod.path = path
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def param_count(self) -> int:
        """Closed-form count of this module's own parameters (excluding children)."""
        return 0

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self


# ------------------------------------------------------------------- leaves

class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 1, stride: int = 1, padding: int | None = None,
                 groups: int = 1, bias: bool = True, dilation: int = 1, init_std: float | None = None):
        if cin % groups or cout % groups:
            raise ValueError(f"groups={groups} must divide in={cin} and out={cout}")
        self.cin, self.cout, self.k, self.stride, self.groups, self.dilation = cin, cout, k, stride, groups, dilation
        self.padding = dilation * (k - 1) // 2 if padding is None else padding
        fan_in = cin // groups * k * k
        shape = (cout, cin // groups, k, k)
        self.weight = Parameter(he_normal(shape, fan_in) if init_std is None else init_normal(shape, init_std))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def param_count(self) -> int:
        return self.cout * (self.cin // self.groups) * self.k * self.k + (self.cout if self.bias is not None else 0)

    def forward(self, x: Tensor) -> Tensor:
        out = ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)
        rec = recorder()
        if rec is not None:
            ho, wo = out.shape[2:]
            rec.add(self, "conv", out.shape, self.k * self.k * (self.cin // self.groups) * self.cout * ho * wo)
        return out


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True):
        self.fin, self.fout = fin, fout
        self.weight = Parameter(init_normal((fout, fin), 1.0 / np.sqrt(fin)))
        self.bias = Parameter(np.zeros(fout)) if bias else None

    def param_count(self) -> int:
        return self.fin * self.fout + (self.fout if self.bias is not None else 0)

    def forward(self, x: Tensor) -> Tensor:
        out = ops.linear(x, self.weight, self.bias)
        rec = recorder()
        if rec is not None:
            rec.add(self, "linear", out.shape, self.fin * self.fout, area_power=0)
        return out


def gn_groups_for(channels: int, preferred: int) -> int:
    """Largest divisor of ``channels`` not exceeding ``preferred``."""
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 16, eps: float = 1e-5, strict: bool = False):
        if strict and channels % groups:
            raise ValueError(f"{channels} channels not divisible by {groups} norm groups")
        self.channels = channels
        self.groups = groups if strict else gn_groups_for(channels, groups)
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def param_count(self) -> int:
        return 2 * self.channels

    def forward(self, x: Tensor) -> Tensor:
        out = ops.group_norm(x, self.groups, self.gamma, self.beta, self.eps)
        rec = recorder()
        if rec is not None:
            rec.add(self, "norm", out.shape, 0)
        return out


class ConvNormAct(Module):
    """Conv -> GroupNorm -> SiLU; the conv drops its bias when a norm follows."""

    def __init__(self, cin: int, cout: int, k: int = 1, stride: int = 1, groups: int = 1,
                 norm: bool = True, act: bool = True, padding: int | None = None, gn: int = 16):
        self.conv = Conv2d(cin, cout, k, stride, padding, groups, bias=not norm)
        self.norm = GroupNorm(cout, gn) if norm else None
        self.act = act

    @property
    def cout(self) -> int:
        return self.conv.cout

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return ops.silu(x) if self.act else x
