"""
Difference-of-Exponential filters
=================================

The high-frequency branch of a FreConv module starts life as a derivative
filter: a wide exponential minus a narrow one. This script prints the taps
for every kernel size and checks what the normalization buys us.
"""
# %%
# Build the taps for each kernel extent. The wide part goes into the
# multi-scale convolution and the narrow part, which only survives at the
# centre tap, becomes the pointwise subtrahend.
import numpy as np

from freconv.layer import DoEInit, alpha_coeff, doe_kernel_taps

np.set_printoptions(precision=3, suppress=True, linewidth=120)

for k in (3, 5, 7, 9):
    taps = doe_kernel_taps(DoEInit(k))
    c = k // 2
    print(f"K={k}  sigma0={taps.init.sigma0:.3f}")
    print("  centre before normalization:", taps.composite[c, c],
          "= alpha(s0) - alpha(s1) =", alpha_coeff(taps.init.sigma0) - alpha_coeff(taps.init.sigma1))
    print("  tap sum before / after     :", taps.composite.sum(), taps.composite_zero_dc.sum())

# %%
# Raw taps leave a DC residue, so a flat image would pass straight through.
# After rescaling the subtrahend the filter sums to zero: a true high-pass.
taps = doe_kernel_taps(DoEInit(5))
print(taps.composite_zero_dc)

# %%
# The frequency response makes the point directly. Zero-pad the 5x5 filter
# to 32x32 and look at the magnitude along one axis, from DC to Nyquist.
resp = np.abs(np.fft.fft2(taps.composite_zero_dc, s=(32, 32)))[0, :17]
print("response, DC -> Nyquist:", resp)
