"""
What each branch passes
=======================

Feed white noise through a freshly initialized FreConv module and compare
the averaged energy spectra of its two branches. Noise has a flat spectrum,
so any tilt comes from the filters themselves.
"""
# %%
import numpy as np

from freconv import layer, spectrum
from freconv.arch import stage_kernel_schedule
from freconv.tensor import Rng

cfg = layer.FreConvConfig(64, 64, kernel_set=stage_kernel_schedule(1))
params, _ = layer.init_params(cfg, Rng(0))
x = Rng(1).normal(0.0, 1.0, (100, 64, 32, 32))

top, bottom = layer.feature_split(x, cfg, params)
high = spectrum.average_spectrum([layer.hfe_forward(bottom, cfg, params)], "hfe")
low = spectrum.average_spectrum([layer.lfe_forward(top, cfg, params)], "lfe")

# %%
# Band-energy ratio: energy outside half the Nyquist radius over energy
# inside it. A flat spectrum gives the area ratio of the two bands.
print("flat spectrum :", spectrum.band_area_ratio(32, 32))
print("low branch    :", spectrum.band_energy_ratio(low))
print("high branch   :", spectrum.band_energy_ratio(high))

# %%
# The radial profiles, normalized to the innermost band, show the shape.
for name, m in (("low", low), ("high", high)):
    prof = spectrum.radial_profile(m, 8)
    e = np.array([b[2] for b in prof.bins])
    print(f"{name:>5}:", np.round(e / e[0], 2))
