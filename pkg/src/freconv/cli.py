"""Command-line entry point: ``freconv <subcommand> [flags]``.

Exit codes: 0 success, 1 user error (bad flag, bad file, invalid config),
2 internal failure (failed invariant, gradient check, diverged training).
The resolved configuration of every run is printed to stderr as JSON.
"""
from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import arch, cost, layer, spectrum, train
from .errors import (ConfigError, FormatError, FreConvError, GradCheckError, GraphError, ParameterError,
                     ShapeError, TrainingError)
from .tensor import Rng, read_tensor, write_tensor

USER_ERRORS = (ConfigError, FormatError, GraphError, ParameterError, ShapeError, OSError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def shape_arg(text: str) -> tuple:
    m = re.fullmatch(r"(\d+)x(\d+)x(\d+)", text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"expected CxHxW (e.g. 3x224x224), got {text!r}")
    return tuple(int(v) for v in m.groups())


def _choice_int(choices):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
        if v not in choices:
            raise argparse.ArgumentTypeError(f"must be one of {sorted(choices)}, got {v}")
        return v
    return parse


def _add_variant_flags(p):
    p.add_argument("--variant", choices=("baseline", "freconv"), default="baseline", help="baseline or FreConv network")
    p.add_argument("--mode", choices=("dck", "gck"), default="gck", help="large-kernel realization")
    p.add_argument("--n", type=_choice_int({2, 4, 8, 16}), default=2, help="feature-split count N")
    p.add_argument("--g1", type=_choice_int({2, 4, 8, 16}), default=2, help="base group for GCK/DCK")
    p.add_argument("--attn-reduction", type=int, default=16, help="attention bottleneck reduction ratio")
    p.add_argument("--split-mode", choices=("attention", "direct"), default="attention", help="feature split")
    p.add_argument("--branch-mode", choices=("asymmetric", "same"), default="asymmetric", help="branch ablation")
    p.add_argument("--downsample", choices=("strided", "pool"), default="strided",
                   help="max-pool replacement in the FreConv variant")


def _add_arch_flags(p):
    p.add_argument("--arch", choices=arch.FAMILIES, default="resnet50", help="network family")
    _add_variant_flags(p)
    p.add_argument("--input", type=shape_arg, default=(3, 224, 224), help="input shape CxHxW")
    p.add_argument("--classes", type=int, default=1000, help="classifier width")


def _options(a) -> arch.VariantOptions:
    return arch.VariantOptions(a.n, a.mode, a.g1, a.attn_reduction, a.split_mode, a.branch_mode, a.downsample)


def _graph(a, variant=None) -> arch.ArchGraph:
    return arch.build_arch(a.arch, variant or a.variant, _options(a), a.classes, a.input)


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _synth_flags(p, default_per_class=1000):
    p.add_argument("--samples-per-class", type=int, default=default_per_class, help="synthetic images per class")
    p.add_argument("--image-size", type=int, default=64, help="synthetic image side length")
    p.add_argument("--noise", type=float, default=0.05, help="additive white-noise std")
    p.add_argument("--data-seed", type=int, default=0, help="synthetic dataset seed")


def _dataset(a, seed_offset=0, per_class=None):
    if getattr(a, "data", None):
        return train.read_dataset(a.data)
    spec = train.SynthSpec(a.image_size, per_class or a.samples_per_class, a.noise, a.data_seed + seed_offset)
    return train.gen_synth_dataset(spec)


# -- subcommands ---------------------------------------------------------------

def cmd_build(a):
    _emit(_graph(a).to_json(indent=1), a.out)


def cmd_analyze(a):
    if a.arch_file:
        graph = arch.ArchGraph.from_json(Path(a.arch_file).read_text())
        report = cost.cost_report(graph, a.input if a.input_given else None, a.flops_convention)
    else:
        report = cost.cost_report(_graph(a), a.input, a.flops_convention)
    if a.compare_baseline:
        if a.arch_file:
            raise ParameterError("--compare-baseline needs --arch, not --arch-file")
        base = cost.cost_report(_graph(a, "baseline"), a.input, a.flops_convention)
        report = cost.reduction_report(base, report)
    _emit(cost.render(report, a.format), a.out)


def _spectrum_inputs(a):
    if a.images:
        return read_tensor(a.images).astype(np.float64)
    c, h, w = a.noise_shape
    return Rng(a.seed).normal(0.0, 1.0, (a.noise_images, c, h, w))


def cmd_spectrum(a):
    x = _spectrum_inputs(a)
    features = x
    if a.layer != "input":
        cfg = layer.FreConvConfig(x.shape[1], a.out_channels or x.shape[1], 1, a.n,
                                  arch.stage_kernel_schedule(a.stage), a.mode, a.g1, a.attn_reduction)
        params, buffers = layer.init_params(cfg, Rng(a.seed).spawn(1))
        top, bottom = layer.feature_split(x, cfg, params)
        if a.layer == "hfe":
            features = layer.hfe_forward(bottom, cfg, params)
        elif a.layer == "lfe":
            features = layer.lfe_forward(top, cfg, params)
        else:
            features = layer.freconv_forward(x, cfg, params, buffers, "eval")
    smap = spectrum.average_spectrum([features], a.layer)
    profile = spectrum.radial_profile(smap, a.bins)
    if a.out_map:
        spectrum.write_map_csv(a.out_map, smap)
    if a.out_profile:
        spectrum.write_profile_csv(a.out_profile, profile)
    summary = {
        "layer": a.layer,
        "images": smap.image_count,
        "grid": list(smap.grid.shape),
        "band_energy_ratio": spectrum.band_energy_ratio(smap, a.fraction),
        "flat_spectrum_ratio": spectrum.band_area_ratio(*smap.grid.shape, a.fraction),
        "split_radius_fraction": a.fraction,
        "meta": smap.meta,
    }
    _emit(json.dumps(summary, indent=1), None)


def cmd_init_dump(a):
    init = layer.DoEInit(a.k, a.sigma0, a.sigma1)
    taps = layer.doe_kernel_taps(init)
    grid = np.stack([taps.composite, taps.composite_zero_dc])[None]
    write_tensor(a.out, grid)
    c = a.k // 2
    meta = {
        "file": str(a.out),
        "layout": "[1, 2, K, K]: channel 0 = composite taps before zero-DC normalization, channel 1 = after",
        "K": a.k,
        "sigma0": init.sigma0,
        "sigma1": init.sigma1,
        "alpha_sigma0": layer.alpha_coeff(init.sigma0),
        "alpha_sigma1": layer.alpha_coeff(init.sigma1),
        "center_pre": float(taps.composite[c, c]),
        "center_post": float(taps.composite_zero_dc[c, c]),
        "pointwise_pre": taps.pointwise,
        "pointwise_post": taps.pointwise_zero_dc,
        "tap_sum_pre": float(taps.composite.sum()),
        "tap_sum_post": float(taps.composite_zero_dc.sum()),
    }
    meta_path = a.meta or str(a.out) + ".json"
    Path(meta_path).write_text(json.dumps(meta, indent=1) + "\n")
    _emit(json.dumps(meta, indent=1), None)


def cmd_gradcheck(a):
    from .gradcheck import grad_check_suite
    report = grad_check_suite(a.seed, a.conv_cases, a.other_cases, a.freconv_rounds)
    text = json.dumps(report.to_dict(), indent=1)
    _emit(text, a.out)
    if a.out:
        _emit(text, None)
    report.raise_on_failure()


def _train_graph(a, images):
    if a.arch_file:
        return arch.ArchGraph.from_json(Path(a.arch_file).read_text())
    opts = _options(a)
    if a.attn_reduction == 16:
        opts = arch.VariantOptions(opts.n_split, opts.mode, opts.base_group, 4, opts.split_mode,
                                   opts.branch_mode, opts.downsample)
    return arch.build_toy(images.shape[1], images.shape[2], int(a.classes), options=opts)


def cmd_train(a):
    images, labels = _dataset(a)
    graph = _train_graph(a, images)
    dtype = np.float32 if a.dtype == "f32" else np.float64
    images = images.astype(dtype)
    params, buffers = arch.init_graph_params(graph, a.seed, dtype)
    cfg = train.TrainConfig(a.epochs, a.batch_size, a.lr, a.momentum, a.weight_decay, a.seed, a.lr_step,
                            a.checkpoint)
    result = train.train(graph, params, buffers, images, labels, cfg)
    acc = train.evaluate(graph, params, buffers, images, labels)
    _emit(json.dumps({"loss_history": result.loss_history, "train_accuracy": acc,
                      "checkpoint": a.checkpoint}, indent=1), None)


def cmd_eval(a):
    graph, params, buffers, state = train.load_checkpoint(a.checkpoint)
    if not getattr(a, "data", None) and a.data_seed == 0:
        a.data_seed = 1_000_003  # held-out stream, distinct from the default training seed
    images, labels = _dataset(a)
    dtype = next(iter(next(iter(params.values())).values())).dtype
    acc = train.evaluate(graph, params, buffers, images.astype(dtype), labels)
    _emit(json.dumps({"accuracy": acc, "samples": int(len(labels))}, indent=1), a.out)


def cmd_synth(a):
    images, labels = _dataset(a)
    train.write_dataset(a.out, images, labels)
    _emit(json.dumps({"out": a.out, "images": list(images.shape), "labels": int(len(labels))}), None)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="freconv", description="FreConv kernels, cost model, spectra and toy training.",
                     formatter_class=fmt)
    parser.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="emit an architecture JSON", formatter_class=fmt)
    _add_arch_flags(p)
    p.add_argument("--out", default=None, help="output path (stdout when omitted)")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("analyze", help="parameter/MAC counts and reductions", formatter_class=fmt)
    _add_arch_flags(p)
    p.add_argument("--arch-file", default=None, help="analyze an architecture JSON instead of --arch")
    p.add_argument("--format", choices=("json", "table", "csv"), default="json", help="report format")
    p.add_argument("--flops-convention", choices=("mac", "2mac"), default="mac", help="FLOPs per MAC")
    p.add_argument("--compare-baseline", action="store_true", help="emit a reduction report vs the baseline")
    p.add_argument("--out", default=None, help="output path (stdout when omitted)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("spectrum", help="average energy spectrum of images or FreConv branches", formatter_class=fmt)
    p.add_argument("--images", default=None, help="FRTN tensor [n, c, h, w]; white noise when omitted")
    p.add_argument("--noise-shape", type=shape_arg, default=(64, 32, 32), help="white-noise input shape CxHxW")
    p.add_argument("--noise-images", type=int, default=100, help="number of white-noise images")
    p.add_argument("--layer", choices=("input", "hfe", "lfe", "freconv"), default="input",
                   help="which features to analyze")
    p.add_argument("--stage", type=int, default=1, help="stage selecting the FreConv kernel set")
    p.add_argument("--mode", choices=("dck", "gck"), default="gck", help="large-kernel realization")
    p.add_argument("--n", type=_choice_int({2, 4, 8, 16}), default=2, help="feature-split count N")
    p.add_argument("--g1", type=_choice_int({2, 4, 8, 16}), default=2, help="base group")
    p.add_argument("--attn-reduction", type=int, default=16, help="attention reduction ratio")
    p.add_argument("--out-channels", type=int, default=None, help="FreConv output channels (default: input's)")
    p.add_argument("--fraction", type=float, default=0.5, help="band split radius as a fraction of Nyquist")
    p.add_argument("--bins", type=int, default=16, help="radial profile bins")
    p.add_argument("--out-map", default=None, help="CSV path for the averaged spectrum map")
    p.add_argument("--out-profile", default=None, help="CSV path for the radial profile")
    p.add_argument("--seed", type=int, default=0, help="seed for noise inputs and FreConv init")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("init-dump", help="dump Difference-of-Exponential taps", formatter_class=fmt)
    p.add_argument("--k", type=int, default=3, help="odd kernel extent")
    p.add_argument("--sigma0", type=float, default=None, help="wide scale (default: derived from K)")
    p.add_argument("--sigma1", type=float, default=layer.POINTWISE_SIGMA, help="pointwise scale")
    p.add_argument("--out", required=True, help="FRTN output path")
    p.add_argument("--meta", default=None, help="metadata JSON path (default: OUT.json)")
    p.set_defaults(func=cmd_init_dump)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="suite seed")
    p.add_argument("--conv-cases", type=int, default=40, help="random convolution cases")
    p.add_argument("--other-cases", type=int, default=8, help="cases per other op")
    p.add_argument("--freconv-rounds", type=int, default=4, help="rounds over the FreConv config list")
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a network on the synthetic task", formatter_class=fmt)
    p.add_argument("--arch-file", default=None, help="architecture JSON (default: the toy FreConv net)")
    _add_variant_flags(p)
    p.add_argument("--classes", type=int, default=2, help="classes of the toy net")
    p.add_argument("--data", default=None, help="dataset directory (images.frtn + labels.txt)")
    _synth_flags(p)
    p.add_argument("--epochs", type=int, default=3, help="epochs")
    p.add_argument("--batch-size", type=int, default=32, help="mini-batch size")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--weight-decay", type=float, default=1e-4, help="L2 weight decay")
    p.add_argument("--lr-step", type=int, default=0, help="epochs per x0.1 LR decay (0: constant)")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32", help="training precision")
    p.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", default=None, help="dataset directory (default: fresh synthetic test set)")
    _synth_flags(p, default_per_class=250)
    p.add_argument("--out", default=None, help="JSON output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic dataset directory", formatter_class=fmt)
    _synth_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def _resolved(a) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(a).items() if k != "func"}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if a.command == "analyze":
            a.input_given = "--input" in argv or any(s.startswith("--input=") for s in argv)
        if a.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as e:
        print(str(e).splitlines()[0], file=sys.stderr)
        return 1
    print("config: " + json.dumps(_resolved(a), sort_keys=True), file=sys.stderr)
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=a.threads):
            a.func(a)
    except (GradCheckError, TrainingError) as e:
        print(f"error: {e}".splitlines()[0], file=sys.stderr)
        return 2
    except USER_ERRORS as e:
        print(f"error: {e}".splitlines()[0], file=sys.stderr)
        return 1
    except Exception as e:  # invariant breach or bug
        print(f"internal error: {type(e).__name__}: {e}".splitlines()[0], file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
