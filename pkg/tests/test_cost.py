import csv
import io
import json

import pytest

from freconv import arch, cost, layer
from freconv.arch import ArchGraph, LayerNode, VariantOptions
from freconv.errors import ParameterError


def report(fam, variant="baseline", **opts):
    return cost.cost_report(arch.build_arch(fam, variant, VariantOptions(**opts)))


def test_resnet50_anchor():
    r = report("resnet50")
    assert abs(r.total_params - 25.56e6) <= 0.001 * 25.56e6
    assert abs(r.total_macs - 4.14e9) <= 0.02 * 4.14e9
    assert r.total_params == 25_557_032  # torchvision's published count for this topology


def test_hand_counted_small_graph():
    g = ArchGraph("g", [
        LayerNode("c", "conv", dict(in_channels=3, out_channels=8, kernel=3, padding=1, has_bias=True), ["input"]),
        LayerNode("bn", "batchnorm", dict(channels=8), ["c"]),
        LayerNode("r", "activation", dict(kind="relu"), ["bn"]),
        LayerNode("p", "gap", {}, ["r"]),
        LayerNode("fc", "linear", dict(in_features=8, out_features=5), ["p"]),
    ], (3, 10, 10), 5)
    r = cost.cost_report(g)
    assert r.total_params == (8 * 3 * 9 + 8) + 16 + (8 * 5 + 5)
    assert r.total_macs == 8 * 100 * 27 + 40
    assert [l.macs for l in r.per_layer][1:4] == [0, 0, 0]


def test_freconv_cost_by_hand():
    cfg = layer.FreConvConfig(32, 32, 1, 2, (3, 5), "gck", 2, attn_reduction=4)
    p, m = cost.freconv_cost(cfg, (8, 8))
    hw = 64
    att = 2 * (32 * 8 + 8 + 8 * 32 + 32)
    ms = 16 * (16 // 2) * 9 + 16 * (16 // 4) * 25  # K=3 g=2, K=5 g=4
    pw = 2 * 32 * 16
    assert p == att + ms + pw + 4 * 32
    assert m == (2 * (32 * 8 + 8 * 32)) + (ms + pw) * hw


def test_counting_is_structural():
    g = arch.build_toy()
    a = cost.cost_report(g)
    b = cost.cost_report(ArchGraph.from_json(g.to_json()))
    assert a.to_dict() == b.to_dict()


def test_dck_same_cost_as_3x3_everywhere():
    for k in (5, 7, 9):
        cfg = layer.FreConvConfig(64, 64, 1, 2, (3, k), "dck", 2)
        specs = dict(cfg.sub_convs())
        for name, s in specs.items():
            assert s.kernel == 3
        assert specs[k].groups == specs[3].groups


def test_reduction_self_is_zero():
    r = report("vgg16")
    rr = cost.reduction_report(r, r)
    assert rr.param_delta_pct == 0.0 and rr.macs_delta_pct == 0.0


def test_pct_delta_half_up():
    assert cost.pct_delta(3, 2) == -33.33
    assert cost.pct_delta(8, 9.0001) == 12.5  # 12.50125 → 12.50
    assert cost.pct_delta(200, 200.01) == 0.01  # 0.005 → 0.01 half up
    assert cost.pct_delta(200, 199.99) == -0.01
    with pytest.raises(ZeroDivisionError):
        cost.pct_delta(0, 1)


def test_mismatched_inputs_rejected():
    a = cost.cost_report(arch.build_arch("resnet50"), (3, 224, 224))
    b = cost.cost_report(arch.build_arch("resnet50"), (3, 112, 112))
    with pytest.raises(ParameterError):
        cost.reduction_report(a, b)


def test_flops_convention():
    g = arch.build_arch("resnet50")
    one, two = cost.cost_report(g, flops_convention="mac"), cost.cost_report(g, flops_convention="2mac")
    assert two.total_flops == 2 * one.total_flops and one.total_macs == two.total_macs
    with pytest.raises(ParameterError):
        cost.cost_report(g, flops_convention="3mac")


def test_meta_records_conventions():
    r = report("resnet50", "freconv")
    assert r.meta["freconv_nodes"] == 16 and r.meta["design_decisions"]
    assert "batchnorm" in r.meta["excluded"]
    assert "design_decisions" not in report("resnet50").meta


def test_reduction_ordering_across_variants():
    base = report("resnet50")
    gck2, dck2, gck4 = report("resnet50", "freconv"), report("resnet50", "freconv", mode="dck"), \
        report("resnet50", "freconv", n_split=4)
    assert gck4.total_params < dck2.total_params < gck2.total_params < base.total_params
    assert gck4.total_macs < dck2.total_macs < gck2.total_macs < base.total_macs


def test_render_formats():
    rr = cost.reduction_report(report("resnet50"), report("resnet50", "freconv"))
    d = json.loads(cost.render(rr, "json"))
    assert d["param_delta_pct"] == rr.param_delta_pct
    rows = list(csv.reader(io.StringIO(cost.render(rr, "csv"))))
    assert rows[0][0] == "name" and len(rows) == 3
    table = cost.render(rr, "table")
    assert "25.56M" in table and "-25.99" in table
    per = list(csv.reader(io.StringIO(cost.render(report("vgg16"), "csv"))))
    assert per[-1][0] == "TOTAL" and int(per[-1][2]) == report("vgg16").total_params
    with pytest.raises(ParameterError):
        cost.render(rr, "xml")
