"""Central finite-difference checks for every op with a backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layer, ops
from .errors import GradCheckError
from .layer import FreConvConfig
from .ops import BNStats, ConvParams, ConvSpec
from .tensor import Rng

EPS = 1e-5
THRESHOLD = 1e-4
FLOOR = 1e-8


def rel_error(analytic, numeric, floor=FLOOR):
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, arr, eps=EPS):
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


@dataclass
class OpResult:
    op: str
    cases: int = 0
    max_rel_err: float = 0.0
    worst: str = ""

    def update(self, label, analytic, numeric):
        err = rel_error(analytic, numeric)
        if err.size == 0:
            return
        i = int(np.argmax(err))
        if err.flat[i] > self.max_rel_err or not self.worst:
            self.max_rel_err = float(err.flat[i])
            coord = tuple(int(v) for v in np.unravel_index(i, err.shape))
            self.worst = f"{label}{list(coord)}"


@dataclass
class GradCheckReport:
    seed: int
    results: dict = field(default_factory=dict)
    threshold: float = THRESHOLD

    @property
    def total_cases(self) -> int:
        return sum(r.cases for r in self.results.values())

    @property
    def passed(self) -> bool:
        return all(r.max_rel_err < self.threshold for r in self.results.values())

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "eps": EPS,
            "threshold": self.threshold,
            "total_cases": self.total_cases,
            "passed": self.passed,
            "ops": {k: vars(v) for k, v in self.results.items()},
        }

    def raise_on_failure(self):
        bad = [r for r in self.results.values() if r.max_rel_err >= self.threshold]
        if bad:
            msg = "; ".join(f"{r.op}: {r.max_rel_err:.3g} at {r.worst}" for r in bad)
            raise GradCheckError(f"finite-difference check failed: {msg}")


def _probe(rng, shape):
    return rng.normal(0.0, 1.0, shape)


def check_conv(rng, res):
    g = int(rng.permutation(3)[0])
    g = (1, 2, 4)[g]
    k = (1, 3, 5)[int(rng.permutation(3)[0])]
    r = 1 + int(rng.permutation(2)[0])
    s = 1 + int(rng.permutation(2)[0])
    cin, cout = g * (1 + int(rng.permutation(2)[0])), g * (1 + int(rng.permutation(2)[0]))
    spec = ConvSpec.same(cin, cout, k, s, r, g, has_bias=True)
    x = _probe(rng, (2, cin, 5, 5))
    p = ConvParams(_probe(rng, spec.weight_shape), _probe(rng, (cout,)))
    out = ops.conv2d_forward(x, spec, p)
    up = _probe(rng, out.shape)
    f = lambda: float((ops.conv2d_forward(x, spec, p) * up).sum())
    gx, gw, gb = ops.conv2d_backward(x, spec, p, up)
    label = f"K={k},r={r},g={g},s={s}"
    res.update(label + " x", gx, numeric_grad(f, x))
    res.update(label + " w", gw, numeric_grad(f, p.weights))
    res.update(label + " b", gb, numeric_grad(f, p.bias))
    res.cases += 1


def check_batchnorm(rng, res, mode="train"):
    c = 3
    x = _probe(rng, (3, c, 3, 3))
    gamma, beta = _probe(rng, (c,)), _probe(rng, (c,))
    stats = BNStats(rng.normal(0, 1, (c,)), rng.uniform(0.5, 2.0, (c,)))

    def fwd(cache=False):
        st = BNStats(stats.mean.copy(), stats.var.copy())
        return ops.batchnorm_forward(x, gamma, beta, st, mode, return_cache=cache)

    y, cache = fwd(True)
    up = _probe(rng, y.shape)
    f = lambda: float((fwd() * up).sum())
    gx, gg, gb = ops.batchnorm_backward(cache, up)
    res.update(mode + " x", gx, numeric_grad(f, x))
    res.update(mode + " gamma", gg, numeric_grad(f, gamma))
    res.update(mode + " beta", gb, numeric_grad(f, beta))
    res.cases += 1


def check_activation(rng, res, kind):
    x = _probe(rng, (2, 3, 4, 4))
    if kind == "relu":
        # keep away from the kink
        x[np.abs(x) < 1e-3] = 0.5
    up = _probe(rng, x.shape)
    f = lambda: float((ops.activation(x, kind) * up).sum())
    if kind == "relu":
        g = ops.relu_backward(x, up)
    else:
        g = ops.sigmoid_backward(ops.sigmoid(x), up)
    res.update(kind, g, numeric_grad(f, x))
    res.cases += 1


def check_gap(rng, res):
    x = _probe(rng, (2, 3, 4, 5))
    up = _probe(rng, (2, 3, 1, 1))
    f = lambda: float((ops.global_avg_pool(x) * up).sum())
    res.update("x", ops.global_avg_pool_backward(x.shape, up), numeric_grad(f, x))
    res.cases += 1


def check_pool(rng, res, mode):
    # a permutation of distinct values keeps max-pool away from ties
    x = (rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) - 72.0) * 0.01 + rng.uniform(0, 0.001, (2, 2, 6, 6))
    k, s, p = 3, 2, 1
    if mode == "max":
        out, arg = ops.max_pool_forward(x, k, s, p)
        up = _probe(rng, out.shape)
        f = lambda: float((ops.max_pool_forward(x, k, s, p)[0] * up).sum())
        g = ops.max_pool_backward(x.shape, arg, up, k, s, p)
    else:
        out = ops.avg_pool_forward(x, k, s, p)
        up = _probe(rng, out.shape)
        f = lambda: float((ops.avg_pool_forward(x, k, s, p) * up).sum())
        g = ops.avg_pool_backward(x.shape, up, k, s, p)
    res.update(mode, g, numeric_grad(f, x))
    res.cases += 1


def check_linear_ce(rng, res):
    n, d, classes = 4, 6, 3
    feat = _probe(rng, (n, d, 1, 1))
    w, b = _probe(rng, (classes, d)), _probe(rng, (classes,))
    labels = rng.permutation(n) % classes
    f = lambda: ops.linear_and_cross_entropy(feat, w, b, labels)[0]
    _, g = ops.linear_and_cross_entropy(feat, w, b, labels)
    res.update("features", g["features"], numeric_grad(f, feat))
    res.update("weights", g["weights"], numeric_grad(f, w))
    res.update("bias", g["bias"], numeric_grad(f, b))
    res.cases += 1


FRECONV_CASES = (
    dict(in_channels=8, out_channels=8, n_split=2, kernel_set=(3, 5), attn_reduction=2),
    dict(in_channels=8, out_channels=8, n_split=2, kernel_set=(3, 5), mode="dck", stride=2, attn_reduction=4),
    dict(in_channels=8, out_channels=8, n_split=4, kernel_set=(3,), attn_reduction=2),
    dict(in_channels=8, out_channels=8, n_split=2, kernel_set=(3,), split_mode="direct", branch_mode="same"),
)


def check_freconv(rng, res, cfg: FreConvConfig, size=6):
    params, _ = layer.init_params(cfg, rng)
    for name in params:
        # move off the symmetric initialization so every path carries gradient
        params[name] = params[name] + rng.normal(0.0, 0.2, params[name].shape)
    x = _probe(rng, (2, cfg.in_channels, size, size))
    out, cache = layer.freconv_forward(x, cfg, params, return_cache=True)
    up = _probe(rng, out.shape)
    f = lambda: float((layer.freconv_forward(x, cfg, params) * up).sum())
    gx, grads = layer.freconv_backward(cache, cfg, params, up)
    label = f"N={cfg.n_split},K={cfg.kernel_set},{cfg.mode},{cfg.split_mode},{cfg.branch_mode}"
    res.update(label + " x", gx, numeric_grad(f, x))
    for name, arr in params.items():
        res.update(f"{label} {name}", grads[name], numeric_grad(f, arr))
    res.cases += 1


def grad_check_suite(seed: int = 0, conv_cases: int = 40, other_cases: int = 8, freconv_rounds: int = 4):
    """Run every check; returns a :class:`GradCheckReport` (call ``raise_on_failure`` to assert)."""
    root = Rng(seed)
    report = GradCheckReport(seed)

    def run(name, fn, count, *args):
        res = report.results.setdefault(name, OpResult(name))
        tag = 100 * len(report.results)
        for i in range(count):
            fn(root.spawn(tag + i), res, *args)

    run("conv2d", check_conv, conv_cases)
    run("batchnorm_train", check_batchnorm, other_cases, "train")
    run("batchnorm_eval", check_batchnorm, other_cases, "eval")
    run("relu", check_activation, other_cases, "relu")
    run("sigmoid", check_activation, other_cases, "sigmoid")
    run("global_avg_pool", check_gap, other_cases)
    run("max_pool", check_pool, other_cases, "max")
    run("avg_pool", check_pool, other_cases, "avg")
    run("linear_cross_entropy", check_linear_ce, other_cases)
    res = report.results.setdefault("freconv", OpResult("freconv"))
    for rnd in range(freconv_rounds):
        for i, kw in enumerate(FRECONV_CASES):
            check_freconv(root.spawn(10_000 + 10 * rnd + i), res, FreConvConfig(**kw))
    return report
