"""Parameter and FLOP accounting per layer and per architectural component.

FLOPs are 2 x multiply-accumulates over convolutions, linears, the dynamic
kernel mixing, and the two attention matrix products; norms and elementwise
ops are free. Costs are measured by running the model once on a small probe
image and scaling each row by its area exponent, which is exact because all
spatial sizes are the input size divided by a fixed stride.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .blocks import recording
from .model import HMPNet, ModelConfig, build
from .tensor import Tensor

COMPONENTS = ("backbone", "neck", "head")
PROBE_SIZE = 64


@dataclass
class CostLine:
    path: str
    kind: str
    out_shape: tuple[int, ...]
    params: int
    flops: int


@dataclass
class CostReport:
    input_size: int
    rows: list[CostLine] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def subtotals(self) -> dict[str, tuple[int, int]]:
        out = {c: [0, 0] for c in COMPONENTS}
        for r in self.rows:
            comp = r.path.split(".", 1)[0]
            acc = out.setdefault(comp, [0, 0])
            acc[0] += r.params
            acc[1] += r.flops
        return {k: (v[0], v[1]) for k, v in out.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("path,kind,out_shape,params,flops\n")
        for r in self.rows:
            shape = "x".join(str(d) for d in r.out_shape)
            buf.write(f"{r.path},{r.kind},{shape},{r.params},{r.flops}\n")
        return buf.getvalue()

    def table(self, detail: bool = True) -> str:
        lines = []
        if detail:
            width = max([len(r.path) for r in self.rows] + [4])
            lines.append(f"{'path':<{width}}  {'kind':<10} {'out_shape':<16} {'params':>10} {'flops':>14}")
            for r in self.rows:
                shape = "x".join(str(d) for d in r.out_shape)
                lines.append(f"{r.path:<{width}}  {r.kind:<10} {shape:<16} {r.params:>10,d} {r.flops:>14,d}")
            lines.append("")
        for comp, (p, f) in self.subtotals().items():
            lines.append(f"{comp:<10} params {p:>12,d}  flops {f:>16,d}")
        lines.append(f"{'total':<10} params {self.total_params:>12,d} ({self.total_params / 1e6:.3f} M)"
                     f"  flops {self.total_flops:>16,d} ({self.total_flops / 1e9:.3f} G) @ {self.input_size}px")
        return "\n".join(lines)


def enumerate_params(model: HMPNet) -> int:
    """Independent count: element total over the unique parameter set."""
    return int(sum(p.size for p in model.parameters()))


def _probe(model: HMPNet):
    x = Tensor(np.zeros((1, 3, PROBE_SIZE, PROBE_SIZE), dtype=model.parameters()[0].dtype))
    with recording() as rec:
        model.forward_any(x)
    return rec.rows


def cost_report(model: HMPNet, input_size: int | None = None) -> CostReport:
    size = input_size or model.config.input_size
    if size % 32:
        raise ValueError(f"input size {size} must be divisible by 32")
    f = Fraction(size, PROBE_SIZE)
    report = CostReport(size)
    for row in _probe(model):
        scale = f ** (2 * row.area_power)
        macs = row.macs * scale
        if row.area_power == 1:
            shape = row.out_shape[:-2] + tuple(d * f for d in row.out_shape[-2:])
        elif row.area_power == 2:
            shape = row.out_shape[:-2] + tuple(d * f * f for d in row.out_shape[-2:])
        else:
            shape = row.out_shape
        if macs.denominator != 1 or any(Fraction(d).denominator != 1 for d in shape):
            raise ValueError(f"{row.path}: cost does not scale to {size}px exactly")
        report.rows.append(CostLine(row.path, row.kind, tuple(int(d) for d in shape), row.params,
                                    2 * int(macs)))
    return report


def count_params(model: HMPNet) -> CostReport:
    return cost_report(model)


def count_flops(model: HMPNet, input_size: int | None = None) -> CostReport:
    return cost_report(model, input_size)


ABLATION_ROWS = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (True, True, True),
)


@dataclass
class AblationRow:
    use_mcpc: bool
    use_pws: bool
    use_hdm: bool
    params: int
    flops: int
    d_params: float | None = None  # percent change vs previous row
    d_flops: float | None = None


def ablation_report(config: ModelConfig) -> list[AblationRow]:
    """Costs for the four cumulative toggle settings, in the order MCPC, +PWS, +HDM."""
    rows: list[AblationRow] = []
    for mcpc, pws, hdm in ABLATION_ROWS:
        cfg = config.with_(use_mcpc=mcpc, use_pws=pws, use_hdm=hdm)
        rep = cost_report(build(cfg))
        row = AblationRow(mcpc, pws, hdm, rep.total_params, rep.total_flops)
        if rows:
            prev = rows[-1]
            row.d_params = 100.0 * (row.params - prev.params) / prev.params
            row.d_flops = 100.0 * (row.flops - prev.flops) / prev.flops
        rows.append(row)
    return rows


def format_ablation(rows: list[AblationRow], input_size: int) -> str:
    mark = {True: "yes", False: "-"}
    out = [f"{'MCPC':>5} {'PWS':>5} {'HDM':>5} {'Params(M)':>10} {'dP%':>7} {'FLOPs(G)':>9} {'dF%':>7}"
           f"   @ {input_size}px"]
    for r in rows:
        dp = "" if r.d_params is None else f"{r.d_params:+.1f}"
        df = "" if r.d_flops is None else f"{r.d_flops:+.1f}"
        out.append(f"{mark[r.use_mcpc]:>5} {mark[r.use_pws]:>5} {mark[r.use_hdm]:>5} "
                   f"{r.params / 1e6:>10.3f} {dp:>7} {r.flops / 1e9:>9.3f} {df:>7}")
    return "\n".join(out)
