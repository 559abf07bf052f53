"""The frequency branch-and-integration convolution.

Data flow for an input ``x`` with ``C`` channels::

    x --attention split--> x_top, x_bottom          (C/N channels each)
    x_bottom --> MultiScale(x_bottom) - Pointwise(x_bottom) --BN--> x_high
    x_top    --> Pointwise(x_top)                     --BN--> x_low
    out = x_high + x_low

The multi-scale path runs one convolution per kernel extent in the stage's
kernel set and concatenates them by channel. Large extents are realized
either by dilating a 3x3 kernel (DCK) or by a larger kernel with more groups
(GCK), so the cost stays close to that of a 3x3 convolution.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ParameterError, ShapeError
from .ops import BNStats, ConvSpec
from .tensor import Rng

ALLOWED_GROUPS = (2, 4, 8, 16)
ALLOWED_KERNELS = (3, 5, 7, 9)
ALLOWED_SPLITS = (2, 4, 8, 16)
POINTWISE_SIGMA = 0.25
OFFDIAG_STD = 0.01
ATTN_STD = 0.01


# -- Difference-of-Exponential initialization ----------------------------------

def alpha_coeff(sigma: float) -> float:
    """Weight of an exponential filter of scale ``sigma``: (1+e^-1/s)/(1-e^-1/s)."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    q = math.exp(-1.0 / sigma)
    return (1.0 + q) / (1.0 - q)


def default_sigma0(k: int) -> float:
    """Scale of the wide exponential for a KxK kernel.

    Chosen so the filter decays to e^-4 of its centre value at the kernel edge
    for every K (sigma0 = 0.5 at K = 3).
    """
    return math.sqrt((k - 1) / 8.0)


@dataclass(frozen=True)
class DoEInit:
    K: int
    sigma0: float | None = None
    sigma1: float = POINTWISE_SIGMA

    def __post_init__(self):
        if self.K < 1 or self.K % 2 == 0:
            raise ParameterError(f"DoE kernel extent must be odd, got {self.K}")
        if self.sigma0 is None:
            object.__setattr__(self, "sigma0", default_sigma0(self.K))
        if not self.sigma0 > self.sigma1 > 0:
            raise ParameterError(f"need sigma0 > sigma1 > 0, got sigma0={self.sigma0}, sigma1={self.sigma1}")


@dataclass
class DoETaps:
    """Tap grids of one Difference-of-Exponential filter.

    ``wide`` goes into the multi-scale convolution; the centre-only term with
    weight ``pointwise`` is the pointwise subtrahend. ``pointwise_zero_dc``
    is the rescaled subtrahend that makes the composite filter sum to zero.
    """
    init: DoEInit
    wide: np.ndarray
    pointwise: float
    pointwise_zero_dc: float

    @property
    def composite(self) -> np.ndarray:
        return self._minus_center(self.pointwise)

    @property
    def composite_zero_dc(self) -> np.ndarray:
        return self._minus_center(self.pointwise_zero_dc)

    def _minus_center(self, value):
        taps = self.wide.copy()
        c = self.init.K // 2
        taps[c, c] -= value
        return taps


def doe_kernel_taps(init: DoEInit) -> DoETaps:
    k = init.K
    half = k // 2
    u = np.arange(-half, half + 1, dtype=np.float64)
    radius = np.sqrt(u[:, None] ** 2 + u[None, :] ** 2)
    wide = alpha_coeff(init.sigma0) * np.exp(-radius / init.sigma0 ** 2)
    # the narrow exponential only survives at the centre tap (1x1 support)
    return DoETaps(init, wide, alpha_coeff(init.sigma1), float(wide.sum()))


# -- large-kernel realizations -------------------------------------------------

def resolve_dck(k: int) -> int:
    """Dilation that gives a 3x3 kernel the receptive field of a KxK one."""
    if k not in ALLOWED_KERNELS:
        raise ParameterError(f"DCK supports K in {ALLOWED_KERNELS}, got {k}")
    return (k - 3) // 2 + 1


def resolve_gck(k: int, g1: int) -> int:
    """Group count keeping a KxK conv near the cost of a 3x3 conv with ``g1`` groups.

    The raw ratio K^2 g1 / 9 is rounded down to the allowed set.
    """
    if k not in ALLOWED_KERNELS:
        raise ParameterError(f"GCK supports K in {ALLOWED_KERNELS}, got {k}")
    if g1 not in ALLOWED_GROUPS:
        raise ParameterError(f"base group must be one of {ALLOWED_GROUPS}, got {g1}")
    raw = k * k * g1 / 9.0
    fitting = [g for g in ALLOWED_GROUPS if g <= raw]
    return fitting[-1] if fitting else ALLOWED_GROUPS[0]


def fit_groups(target: int, cin: int, cout: int, what: str = "") -> int:
    """Largest allowed group count <= ``target`` dividing both channel counts."""
    for g in reversed(ALLOWED_GROUPS):
        if g <= target and cin % g == 0 and cout % g == 0:
            return g
    raise ConfigError(
        f"{what}no group count in {ALLOWED_GROUPS} at or below {target} divides "
        f"in_channels={cin} and out_channels={cout}"
    )


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class FreConvConfig:
    in_channels: int
    out_channels: int
    stride: int = 1
    n_split: int = 2
    kernel_set: tuple = (3, 5, 7, 9)
    mode: str = "gck"
    base_group: int = 2
    attn_reduction: int = 16
    split_mode: str = "attention"
    branch_mode: str = "asymmetric"

    def __post_init__(self):
        object.__setattr__(self, "kernel_set", tuple(sorted(int(k) for k in self.kernel_set)))
        object.__setattr__(self, "mode", self.mode.lower())
        if self.n_split not in ALLOWED_SPLITS:
            raise ConfigError(f"n_split must be one of {ALLOWED_SPLITS}, got {self.n_split}")
        if self.n_split >= self.in_channels:
            raise ConfigError(f"n_split={self.n_split} must be smaller than in_channels={self.in_channels}")
        if self.in_channels % self.n_split:
            raise ConfigError(f"in_channels={self.in_channels} not divisible by n_split={self.n_split}")
        if not self.kernel_set or any(k not in ALLOWED_KERNELS for k in self.kernel_set):
            raise ConfigError(f"kernel_set must be a non-empty subset of {ALLOWED_KERNELS}, got {self.kernel_set}")
        if len(set(self.kernel_set)) != len(self.kernel_set):
            raise ConfigError(f"duplicate kernel extents in {self.kernel_set}")
        if self.out_channels < len(self.kernel_set):
            raise ConfigError(f"out_channels={self.out_channels} cannot cover {len(self.kernel_set)} kernels")
        if self.mode not in ("dck", "gck"):
            raise ConfigError(f"mode must be 'dck' or 'gck', got {self.mode!r}")
        if self.base_group not in ALLOWED_GROUPS:
            raise ConfigError(f"base_group must be one of {ALLOWED_GROUPS}, got {self.base_group}")
        if self.attn_reduction < 1:
            raise ConfigError(f"attn_reduction must be positive, got {self.attn_reduction}")
        if self.split_mode not in ("attention", "direct"):
            raise ConfigError(f"split_mode must be 'attention' or 'direct', got {self.split_mode!r}")
        if self.branch_mode not in ("asymmetric", "same"):
            raise ConfigError(f"branch_mode must be 'asymmetric' or 'same', got {self.branch_mode!r}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        self.sub_convs()  # surfaces group/channel conflicts at construction

    @property
    def branch_channels(self) -> int:
        return self.in_channels // self.n_split

    @property
    def attn_hidden(self) -> int:
        return max(1, self.in_channels // self.attn_reduction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_set"] = list(self.kernel_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FreConvConfig":
        return cls(**d)

    def target_groups(self, k: int) -> int:
        if self.branch_mode == "same":
            return 2
        return self.base_group if self.mode == "dck" else resolve_gck(k, self.base_group)

    def allocation(self) -> dict[int, int]:
        """Output channels per kernel extent.

        Each kernel gets an equal share, rounded down to a multiple of the
        largest group count among the larger kernels so their groups divide
        it; the remainder goes to the smallest K.
        """
        m = len(self.kernel_set)
        share = self.out_channels // m
        unit = max((self.target_groups(k) for k in self.kernel_set[1:]), default=1)
        if share >= unit:
            share -= share % unit
        alloc = {k: share for k in self.kernel_set}
        alloc[self.kernel_set[0]] = self.out_channels - share * (m - 1)
        return alloc

    def sub_convs(self) -> list[tuple[int, ConvSpec]]:
        """``(K, spec)`` of each multi-scale convolution, in concatenation order."""
        cin, s = self.branch_channels, self.stride
        if self.branch_mode == "same":
            g = fit_groups(2, cin, self.out_channels, "same-branch 3x3: ")
            return [(3, ConvSpec.same(cin, self.out_channels, 3, s, 1, g))]
        out = []
        for k, cout in self.allocation().items():
            if self.mode == "dck":
                r = resolve_dck(k)
                g = fit_groups(self.base_group, cin, cout, f"DCK K={k}: ")
                out.append((k, ConvSpec.same(cin, cout, 3, s, r, g)))
            else:
                g = fit_groups(resolve_gck(k, self.base_group), cin, cout, f"GCK K={k}: ")
                out.append((k, ConvSpec.same(cin, cout, k, s, 1, g)))
        return out

    def pointwise_spec(self) -> ConvSpec:
        return ConvSpec(self.branch_channels, self.out_channels, 1, self.stride, 0)

    def attention_specs(self) -> tuple[ConvSpec, ConvSpec]:
        c, h = self.in_channels, self.attn_hidden
        return ConvSpec(c, h, 1, has_bias=True), ConvSpec(h, c, 1, has_bias=True)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return self.pointwise_spec().output_hw(h, w)

    def conv_specs(self) -> dict[str, ConvSpec]:
        """Every convolution inside the module, keyed by its weight name."""
        specs = {}
        if self.split_mode == "attention":
            first, second = self.attention_specs()
            for br in ("a", "b"):
                specs[f"att_{br}1"] = first
                specs[f"att_{br}2"] = second
        if self.branch_mode == "same":
            spec = self.sub_convs()[0][1]
            specs["hfe"] = spec
            specs["lfe"] = spec
        else:
            for k, spec in self.sub_convs():
                specs[f"ms_k{k}"] = spec
            specs["hfe_pw"] = self.pointwise_spec()
            specs["lfe"] = self.pointwise_spec()
        return specs


def param_shapes(config: FreConvConfig) -> dict[str, tuple]:
    shapes = {}
    for name, spec in config.conv_specs().items():
        shapes[name + "_w"] = spec.weight_shape
        if spec.has_bias:
            shapes[name + "_b"] = (spec.out_channels,)
    for br in ("hfe", "lfe"):
        shapes[f"{br}_bn_g"] = (config.out_channels,)
        shapes[f"{br}_bn_b"] = (config.out_channels,)
    return shapes


def buffer_shapes(config: FreConvConfig) -> dict[str, tuple]:
    c = config.out_channels
    return {"hfe_bn_mean": (c,), "hfe_bn_var": (c,), "lfe_bn_mean": (c,), "lfe_bn_var": (c,)}


# -- initialization ------------------------------------------------------------

def _doe_weights(spec: ConvSpec, k: int, rng: Rng, dtype) -> np.ndarray:
    """Multi-scale weights: DoE wide taps on the channel diagonal, small noise elsewhere.

    Output channel ``o`` reads in-group input channel ``o mod (in/groups)``.
    The noise std is OFFDIAG_STD times the largest composite tap on the
    diagonal, so it breaks symmetry without masking the filter shape.
    """
    doe = doe_kernel_taps(DoEInit(k))
    taps, composite = doe.wide, doe.composite_zero_dc
    if spec.dilation > 1:
        # a dilated 3x3 kernel samples the KxK grid every r pixels
        taps = taps[::spec.dilation, ::spec.dilation]
        composite = composite[::spec.dilation, ::spec.dilation]
    cg = spec.in_channels // spec.groups
    w = rng.normal(0.0, OFFDIAG_STD * np.abs(composite).max() / cg, spec.weight_shape)
    for o in range(spec.out_channels):
        w[o, o % cg] = taps / cg
    return w.astype(dtype)


def init_params(config: FreConvConfig, rng: Rng, dtype=np.float64):
    """Fresh ``(params, buffers)`` for one module.

    The pointwise subtrahend is set to the per-(output, input) tap sums of the
    multi-scale weights, so the initial high-frequency branch has zero DC
    response exactly.
    """
    specs = config.conv_specs()
    params = {}
    if config.split_mode == "attention":
        for name in ("att_a1", "att_a2", "att_b1", "att_b2"):
            spec = specs[name]
            params[name + "_w"] = rng.normal(0.0, ATTN_STD, spec.weight_shape).astype(dtype)
            params[name + "_b"] = np.zeros(spec.out_channels, dtype)
    if config.branch_mode == "same":
        spec = specs["hfe"]
        fan_in = spec.weight_shape[1] * spec.kernel ** 2
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), spec.weight_shape).astype(dtype)
        params["hfe_w"] = w
        params["lfe_w"] = w.copy()
    else:
        cin = config.branch_channels
        pw = np.zeros((config.out_channels, cin, 1, 1), dtype)
        offset = 0
        for k, spec in config.sub_convs():
            w = _doe_weights(spec, k, rng, dtype)
            params[f"ms_k{k}_w"] = w
            cg, og = spec.in_channels // spec.groups, spec.out_channels // spec.groups
            sums = w.sum(axis=(2, 3))
            for o in range(spec.out_channels):
                c0 = (o // og) * cg
                pw[offset + o, c0:c0 + cg, 0, 0] = sums[o]
            offset += spec.out_channels
        params["hfe_pw_w"] = pw
        params["lfe_w"] = rng.normal(0.0, math.sqrt(2.0 / cin), (config.out_channels, cin, 1, 1)).astype(dtype)
    for br in ("hfe", "lfe"):
        params[f"{br}_bn_g"] = np.ones(config.out_channels, dtype)
        params[f"{br}_bn_b"] = np.zeros(config.out_channels, dtype)
    buffers = {}
    for br in ("hfe", "lfe"):
        buffers[f"{br}_bn_mean"] = np.zeros(config.out_channels, dtype)
        buffers[f"{br}_bn_var"] = np.ones(config.out_channels, dtype)
    return params, buffers


# -- forward / backward --------------------------------------------------------

def _check_input(x, config: FreConvConfig):
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(f"FreConv expects {config.in_channels} input channels, got shape {x.shape}")


def _chunk_sum(x, n_split):
    n, c, h, w = x.shape
    if c % n_split:
        raise ShapeError(f"{c} channels cannot be divided into {n_split} parts")
    return x.reshape(n, n_split, c // n_split, h, w).sum(axis=1)


def _attention(s, params, branch, specs, cache):
    s1, s2 = specs[f"att_{branch}1"], specs[f"att_{branch}2"]
    z1, cols1 = ops.conv_forward_cached(s, s1, params[f"att_{branch}1_w"], params[f"att_{branch}1_b"])
    a1 = ops.relu(z1)
    z2, cols2 = ops.conv_forward_cached(a1, s2, params[f"att_{branch}2_w"], params[f"att_{branch}2_b"])
    gate = ops.sigmoid(z2)
    if cache is not None:
        cache[branch] = (cols1, z1, cols2, a1.shape, gate)
    return gate


def feature_split(x, config: FreConvConfig, params, _cache=None):
    """``(x_top, x_bottom)``, each with ``C/N`` channels."""
    _check_input(x, config)
    if config.split_mode == "direct":
        top = _chunk_sum(x, config.n_split)
        return top, top.copy()
    specs = config.conv_specs()
    s = ops.global_avg_pool(x)
    alpha = _attention(s, params, "a", specs, _cache)
    beta = _attention(s, params, "b", specs, _cache)
    return _chunk_sum(alpha * x, config.n_split), _chunk_sum(beta * x, config.n_split)


def hfe_forward(x_bottom, config: FreConvConfig, params, _cache=None):
    """High-frequency branch before its batch norm: MultiScale(x) - Pointwise(x)."""
    if x_bottom.shape[1] != config.branch_channels:
        raise ShapeError(f"HFE expects {config.branch_channels} channels, got {x_bottom.shape[1]}")
    specs = config.conv_specs()
    if config.branch_mode == "same":
        out, cols = ops.conv_forward_cached(x_bottom, specs["hfe"], params["hfe_w"])
        if _cache is not None:
            _cache["hfe"] = cols
        return out
    outs = []
    for k, spec in config.sub_convs():
        y, cols = ops.conv_forward_cached(x_bottom, spec, params[f"ms_k{k}_w"])
        outs.append(y)
        if _cache is not None:
            _cache[f"ms_k{k}"] = cols
    pw, cols = ops.conv_forward_cached(x_bottom, specs["hfe_pw"], params["hfe_pw_w"])
    if _cache is not None:
        _cache["hfe_pw"] = cols
    return np.concatenate(outs, axis=1) - pw


def lfe_forward(x_top, config: FreConvConfig, params, _cache=None):
    """Low-frequency branch before its batch norm (pointwise conv, or 3x3 in "same" mode)."""
    if x_top.shape[1] != config.branch_channels:
        raise ShapeError(f"LFE expects {config.branch_channels} channels, got {x_top.shape[1]}")
    out, cols = ops.conv_forward_cached(x_top, config.conv_specs()["lfe"], params["lfe_w"])
    if _cache is not None:
        _cache["lfe"] = cols
    return out


@dataclass
class FreConvCache:
    x: np.ndarray
    top: np.ndarray
    bottom: np.ndarray
    convs: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)


def _stats(buffers, branch):
    if buffers is None:
        return None
    return BNStats(buffers[f"{branch}_bn_mean"], buffers[f"{branch}_bn_var"])


def freconv_forward(x, config: FreConvConfig, params, buffers=None, mode="train", return_cache=False):
    """Full module: split, both branches, per-branch batch norm, point-wise sum.

    ``buffers`` holds the batch-norm running statistics; without it a
    throwaway record is used, so train mode still normalizes by batch stats.
    """
    cache = FreConvCache(x, None, None)
    top, bottom = feature_split(x, config, params, cache.convs)
    cache.top, cache.bottom = top, bottom
    high = hfe_forward(bottom, config, params, cache.convs)
    low = lfe_forward(top, config, params, cache.convs)
    out = None
    for br, raw in (("hfe", high), ("lfe", low)):
        stats = _stats(buffers, br) or BNStats.fresh(config.out_channels, raw.dtype)
        y, bc = ops.batchnorm_forward(raw, params[f"{br}_bn_g"], params[f"{br}_bn_b"], stats, mode, True)
        cache.bn[br] = bc
        out = y if out is None else out + y
    return (out, cache) if return_cache else out


def _attention_backward(g_gate, params, branch, specs, cache, grads):
    cols1, z1, cols2, a1_shape, gate = cache[branch]
    s1, s2 = specs[f"att_{branch}1"], specs[f"att_{branch}2"]
    gz2 = ops.sigmoid_backward(gate, g_gate)
    ga1, gw2, gb2 = ops.conv_backward_cached(cols2, a1_shape, s2, params[f"att_{branch}2_w"], gz2)
    gz1 = ops.relu_backward(z1, ga1)
    gs, gw1, gb1 = ops.conv_backward_cached(cols1, z1.shape[:1] + (s1.in_channels, 1, 1), s1,
                                            params[f"att_{branch}1_w"], gz1)
    grads[f"att_{branch}1_w"], grads[f"att_{branch}1_b"] = gw1, gb1
    grads[f"att_{branch}2_w"], grads[f"att_{branch}2_b"] = gw2, gb2
    return gs


def freconv_backward(cache: FreConvCache, config: FreConvConfig, params, grad_out, need_x=True):
    """Returns ``(grad_x, grads)`` with ``grads`` keyed like ``params``."""
    grads = {}
    specs = config.conv_specs()
    raw_grads = {}
    for br in ("hfe", "lfe"):
        graw, gg, gb = ops.batchnorm_backward(cache.bn[br], grad_out)
        grads[f"{br}_bn_g"], grads[f"{br}_bn_b"] = gg, gb
        raw_grads[br] = graw
    top, bottom = cache.top, cache.bottom

    g_top, grads["lfe_w"], _ = ops.conv_backward_cached(
        cache.convs["lfe"], top.shape, specs["lfe"], params["lfe_w"], raw_grads["lfe"])
    if config.branch_mode == "same":
        g_bottom, grads["hfe_w"], _ = ops.conv_backward_cached(
            cache.convs["hfe"], bottom.shape, specs["hfe"], params["hfe_w"], raw_grads["hfe"])
    else:
        gh = raw_grads["hfe"]
        g_bottom, grads["hfe_pw_w"], _ = ops.conv_backward_cached(
            cache.convs["hfe_pw"], bottom.shape, specs["hfe_pw"], params["hfe_pw_w"], -gh)
        offset = 0
        for k, spec in config.sub_convs():
            gslice = gh[:, offset:offset + spec.out_channels]
            gx_k, grads[f"ms_k{k}_w"], _ = ops.conv_backward_cached(
                cache.convs[f"ms_k{k}"], bottom.shape, spec, params[f"ms_k{k}_w"], gslice)
            g_bottom += gx_k
            offset += spec.out_channels

    x = cache.x
    reps = (1, config.n_split, 1, 1)
    g_xa = np.tile(g_top, reps)
    g_xb = np.tile(g_bottom, reps)
    if config.split_mode == "direct":
        return g_xa + g_xb, grads
    alpha = cache.convs["a"][-1]
    beta = cache.convs["b"][-1]
    gx = alpha * g_xa + beta * g_xb
    g_alpha = (g_xa * x).sum(axis=(2, 3), keepdims=True)
    g_beta = (g_xb * x).sum(axis=(2, 3), keepdims=True)
    gs = _attention_backward(g_alpha, params, "a", specs, cache.convs, grads)
    gs = gs + _attention_backward(g_beta, params, "b", specs, cache.convs, grads)
    gx += ops.global_avg_pool_backward(x.shape, gs)
    return gx, grads
