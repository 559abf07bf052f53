"""Static parameter and multiply-accumulate counts over architecture graphs.

Conventions: one multiply-accumulate (MAC) counts as one "FLOP"; batch norm,
activations, pooling, element-wise adds/products and concatenations cost
zero MACs. Batch-norm running statistics are buffers, not parameters.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .arch import ArchGraph, infer_shapes
from .errors import GraphError, ParameterError
from .ops import ConvSpec

CONVENTION = {
    "flops": "1 MAC = 1 FLOP",
    "excluded": "batchnorm, activation, pooling, add, concat, attention gating products",
    "bn_running_stats": "not counted as parameters",
}

FRECONV_DECISIONS = (
    "multi-scale channels: equal shares rounded to the largest sub-conv group, remainder to the smallest K",
    "GCK groups: K^2 g1 / 9 rounded down to {2,4,8,16}, then the largest allowed divisor of both channel counts",
    "attention bottleneck: max(1, C // attn_reduction) hidden channels, costed at 1x1 spatial size",
    "one affine batch norm per branch (4 * out_channels parameters)",
    "3x3 convs whose channels cannot be split (e.g. a 3-channel input) stay plain",
    "max-pool replaced by a plain stride-2 3x3 conv; DenseNet transitions keep their average pool",
)


@dataclass
class LayerCost:
    id: str
    kind: str
    params: int
    macs: int


@dataclass
class CostReport:
    name: str
    input_shape: tuple
    per_layer: list
    total_params: int
    total_macs: int
    flops_convention: str = "mac"
    meta: dict = field(default_factory=dict)

    @property
    def total_flops(self) -> int:
        return self.total_macs * (2 if self.flops_convention == "2mac" else 1)

    def to_dict(self, per_layer=True) -> dict:
        d = {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "flops_convention": self.flops_convention,
            "meta": self.meta,
        }
        if per_layer:
            d["per_layer"] = [vars(l) for l in self.per_layer]
        return d


def _conv_cost(cs: ConvSpec, out_hw) -> tuple[int, int]:
    cin_g = cs.in_channels // cs.groups
    params = cs.out_channels * cin_g * cs.kernel ** 2 + (cs.out_channels if cs.has_bias else 0)
    macs = cs.out_channels * out_hw[0] * out_hw[1] * cin_g * cs.kernel ** 2
    return params, macs


def freconv_cost(cfg, in_hw) -> tuple[int, int]:
    """Params and MACs of one FreConv module on an input plane of size ``in_hw``."""
    out_hw = cfg.output_hw(*in_hw)
    params = macs = 0
    for name, cs in cfg.conv_specs().items():
        hw = (1, 1) if name.startswith("att_") else out_hw
        p, m = _conv_cost(cs, hw)
        params += p
        macs += m
    params += 4 * cfg.out_channels  # affine batch norm after each branch
    return params, macs


def node_cost(node, in_shape, out_shape) -> tuple[int, int]:
    kind = node.kind
    if kind == "conv":
        return _conv_cost(node.conv_spec(), out_shape[1:])
    if kind == "freconv":
        return freconv_cost(node.freconv_config(), in_shape[1:])
    if kind == "batchnorm":
        return 2 * node.spec["channels"], 0
    if kind == "linear":
        fin, fout = node.spec["in_features"], node.spec["out_features"]
        return fout * fin + fout, fout * fin
    if kind in ("activation", "pool", "gap", "add", "concat"):
        return 0, 0
    raise GraphError(f"cannot cost node kind {kind!r}", node.id)


def cost_report(graph: ArchGraph, input_shape=None, flops_convention="mac") -> CostReport:
    if flops_convention not in ("mac", "2mac"):
        raise ParameterError(f"flops convention must be 'mac' or '2mac', got {flops_convention!r}")
    input_shape = tuple(input_shape or graph.input_shape)
    shapes = infer_shapes(graph, input_shape)
    rows = []
    for node in graph.nodes:
        p, m = node_cost(node, shapes[node.inputs[0]], shapes[node.id])
        rows.append(LayerCost(node.id, node.kind, p, m))
    meta = dict(CONVENTION)
    meta["freconv_nodes"] = graph.count("freconv")
    if meta["freconv_nodes"]:
        meta["design_decisions"] = list(FRECONV_DECISIONS)
    return CostReport(graph.name, input_shape, rows, sum(r.params for r in rows), sum(r.macs for r in rows),
                      flops_convention, meta)


def count_params(graph: ArchGraph) -> CostReport:
    return cost_report(graph)


def count_macs(graph: ArchGraph, input_shape=None) -> CostReport:
    return cost_report(graph, input_shape)


def pct_delta(base: float, variant: float) -> float:
    """100 (variant - base) / base, rounded half-up to two decimals."""
    if base == 0:
        raise ZeroDivisionError("reduction relative to a zero baseline")
    raw = (Decimal(str(variant)) - Decimal(str(base))) * 100 / Decimal(str(base))
    return float(raw.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class ReductionReport:
    base: CostReport
    variant: CostReport
    param_delta_pct: float
    macs_delta_pct: float

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(per_layer=False),
            "variant": self.variant.to_dict(per_layer=False),
            "param_delta_pct": self.param_delta_pct,
            "macs_delta_pct": self.macs_delta_pct,
        }


def reduction_report(base: CostReport, variant: CostReport) -> ReductionReport:
    if tuple(base.input_shape) != tuple(variant.input_shape):
        raise ParameterError(f"input shapes differ: {base.input_shape} vs {variant.input_shape}")
    return ReductionReport(base, variant, pct_delta(base.total_params, variant.total_params),
                           pct_delta(base.total_macs, variant.total_macs))


# -- rendering -----------------------------------------------------------------

def _fmt_m(v):
    return f"{v / 1e6:.2f}M"


def _fmt_g(v):
    return f"{v / 1e9:.2f}G"


def render(report, fmt="json") -> str:
    """``report`` is a CostReport or ReductionReport; ``fmt`` one of json, table, csv."""
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2)
    reports = [report] if isinstance(report, CostReport) else [report.base, report.variant]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if isinstance(report, CostReport):
            w.writerow(["id", "kind", "params", "macs"])
            for r in report.per_layer:
                w.writerow([r.id, r.kind, r.params, r.macs])
            w.writerow(["TOTAL", "", report.total_params, report.total_macs])
        else:
            w.writerow(["name", "params", "macs", "param_delta_pct", "macs_delta_pct"])
            w.writerow([report.base.name, report.base.total_params, report.base.total_macs, "", ""])
            w.writerow([report.variant.name, report.variant.total_params, report.variant.total_macs,
                        f"{report.param_delta_pct:.2f}", f"{report.macs_delta_pct:.2f}"])
        return buf.getvalue()
    if fmt == "table":
        label = "FLOPs" if reports[0].flops_convention == "2mac" else "MACs"
        lines = [f"{'network':<40} {'Params':>10} {'Reduced':>9} {label:>9} {'Reduced':>9}"]
        for i, r in enumerate(reports):
            dp = dm = "-"
            if i == 1:
                dp, dm = f"{report.param_delta_pct:+.2f}", f"{report.macs_delta_pct:+.2f}"
            lines.append(f"{r.name:<40} {_fmt_m(r.total_params):>10} {dp:>9} {_fmt_g(r.total_flops):>9} {dm:>9}")
        return "\n".join(lines) + "\n"
    raise ParameterError(f"unknown format {fmt!r}")
