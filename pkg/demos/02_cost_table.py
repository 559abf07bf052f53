"""
Parameter and MAC budget
========================

Rebuild the cost comparison for every backbone: the baseline next to its
FreConv counterpart at 224x224, one MAC counted as one FLOP.
"""
# %%
from freconv import arch, cost
from freconv.arch import VariantOptions

rows = [
    ("resnet50", VariantOptions()),
    ("resnet50", VariantOptions(mode="dck")),
    ("resnet50", VariantOptions(n_split=4)),
    ("resnet101", VariantOptions()),
    ("resnet152", VariantOptions()),
    ("vgg16", VariantOptions()),
    ("densenet121", VariantOptions()),
]

for family, opts in rows:
    base = cost.cost_report(arch.build_arch(family))
    var = cost.cost_report(arch.build_arch(family, "freconv", opts))
    print(cost.render(cost.reduction_report(base, var), "table"))

# %%
# Where does the ResNet-50 budget go? Sum the FreConv nodes stage by stage.
g = arch.build_arch("resnet50", "freconv")
r = cost.cost_report(g)
by_stage = {}
for row in r.per_layer:
    if row.kind == "freconv":
        p, m = by_stage.get(g.stage_of[row.id], (0, 0))
        by_stage[g.stage_of[row.id]] = (p + row.params, m + row.macs)
for stage, (p, m) in sorted(by_stage.items()):
    print(f"stage {stage}: kernels {str(arch.stage_kernel_schedule(stage)):<14} {p / 1e6:6.2f}M params  {m / 1e9:5.2f}G MACs")
