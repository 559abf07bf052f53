"""Desk-scale training: a synthetic frequency task, SGD, evaluation, checkpoints.

Class 0 images are smooth blobs and gradients (energy below half-Nyquist),
class 1 images are fine gratings (energy above). Every image is standardized
to zero mean and unit variance, so the classes differ only in spectrum.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import arch, ops
from .arch import ArchGraph
from .errors import FormatError, TrainingError
from .spectrum import band_energy_ratio, fft2_energy
from .tensor import Rng, read_tensor, write_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    samples_per_class: int = 1000
    noise: float = 0.05
    seed: int = 0
    classes: int = 2


def _smooth_image(rng: Rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, 2 * np.pi, 1)[0]
    img = (np.cos(theta) * xx + np.sin(theta) * yy) / size * rng.uniform(0.5, 2.0, 1)[0]
    for _ in range(int(rng.uniform(2, 5, 1)[0])):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(0.1, 0.25, 1)[0] * size
        amp = rng.uniform(-1.5, 1.5, 1)[0]
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return img


def _texture_image(rng: Rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(int(rng.uniform(2, 4, 1)[0])):
        # radial frequency between 0.6 and 0.95 of Nyquist (0.5 cycles/pixel)
        f = rng.uniform(0.6, 0.95, 1)[0] * 0.5
        theta = rng.uniform(0, np.pi, 1)[0]
        phase = rng.uniform(0, 2 * np.pi, 1)[0]
        img += rng.uniform(0.5, 1.0, 1)[0] * np.cos(
            2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return img


def gen_synth_dataset(spec: SynthSpec):
    """``(images [N, 1, S, S] float32, labels [N] int64)``, shuffled, exactly balanced."""
    rng = Rng(spec.seed)
    n = spec.samples_per_class
    s = spec.image_size
    imgs = np.empty((2 * n, 1, s, s), np.float64)
    labels = np.repeat(np.arange(2), n)
    for i, lab in enumerate(labels):
        img = _smooth_image(rng, s) if lab == 0 else _texture_image(rng, s)
        img = (img - img.mean()) / (img.std() + 1e-12)
        imgs[i, 0] = img + rng.normal(0.0, spec.noise, (s, s)) if spec.noise > 0 else img
    order = rng.permutation(2 * n)
    return imgs[order].astype(np.float32), labels[order].astype(np.int64)


def class_band_ratios(images, labels, fraction=0.5):
    """Per-image band-energy ratio, grouped by class."""
    out = {}
    for img, lab in zip(images, labels):
        out.setdefault(int(lab), []).append(band_energy_ratio(fft2_energy(img[0]), fraction))
    return {k: np.array(v) for k, v in out.items()}


def write_dataset(directory, images, labels):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "images.frtn", np.ascontiguousarray(images))
    (d / "labels.txt").write_text("".join(f"{int(v)}\n" for v in labels))


def read_dataset(directory):
    d = Path(directory)
    images = read_tensor(d / "images.frtn")
    text = (d / "labels.txt").read_text().split()
    labels = np.array([int(v) for v in text], dtype=np.int64)
    if len(labels) != images.shape[0]:
        raise FormatError(f"{len(labels)} labels for {images.shape[0]} images", 0)
    return images, labels


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    lr_step: int = 0  # epochs between x0.1 decays; 0 disables
    checkpoint: str | None = None


@dataclass
class TrainResult:
    params: dict
    buffers: dict
    loss_history: list
    accuracy_history: list = field(default_factory=list)


def _first_nan_node(graph, x, params, buffers):
    ids = [n.id for n in graph.nodes]
    _, trace = arch.forward(graph, x, params, {k: {n: v.copy() for n, v in b.items()} for k, b in buffers.items()},
                            "train", keep=ids)
    for nid in ids:
        if not np.all(np.isfinite(trace.outputs[nid])):
            return nid
    return None


def train(graph: ArchGraph, params, buffers, images, labels, config: TrainConfig, eval_set=None):
    """SGD with momentum and weight decay. Mutates and returns ``params`` and ``buffers``.

    ``eval_set`` is an optional ``(images, labels)`` pair scored after every epoch.
    """
    rng = Rng(config.seed).spawn(7)
    velocity = {nid: {k: np.zeros_like(v) for k, v in p.items()} for nid, p in params.items()}
    history, acc_history = [], []
    n = images.shape[0]
    for epoch in range(config.epochs):
        lr = config.lr * (0.1 ** (epoch // config.lr_step) if config.lr_step else 1.0)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x, y = images[idx], labels[idx]
            logits, trace = arch.forward(graph, x, params, buffers, "train", trace=True)
            loss, glogits = ops.cross_entropy(logits.astype(np.float64), y)
            if not math.isfinite(loss):
                where = _first_nan_node(graph, x, params, buffers)
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {bi}; first non-finite "
                                    f"output at node {where!r}")
            grads = arch.backward(graph, trace, params, glogits.astype(x.dtype))
            for nid, pg in grads.items():
                for k, g in pg.items():
                    w = params[nid][k]
                    v = velocity[nid][k]
                    v *= config.momentum
                    v += g + config.weight_decay * w
                    w -= lr * v
            total += loss * len(idx)
            seen += len(idx)
        history.append(total / seen)
        if eval_set is not None:
            acc_history.append(evaluate(graph, params, buffers, *eval_set))
        log.info("epoch %d loss %.5f%s", epoch + 1, history[-1],
                 f" acc {acc_history[-1]:.4f}" if acc_history else "")
    if config.checkpoint:
        save_checkpoint(config.checkpoint, graph, params, buffers,
                        {"train_config": asdict(config), "loss_history": history,
                         "accuracy_history": acc_history, "epochs_done": config.epochs})
    return TrainResult(params, buffers, history, acc_history)


def predict(graph, params, buffers, images, batch_size=100):
    out = [arch.execute(graph, images[i:i + batch_size], params, buffers, "eval")
           for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(graph, params, buffers, images, labels, batch_size=100) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) matches the label."""
    if len(labels) == 0:
        return 0.0
    logits = predict(graph, params, buffers, images, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# -- checkpoints ---------------------------------------------------------------

def _store(directory, prefix, tree):
    mapping = {}
    for nid in sorted(tree):
        mapping[nid] = {}
        for name in sorted(tree[nid]):
            arr = np.asarray(tree[nid][name])
            fname = f"{prefix}/{nid}__{name}.frtn"
            (directory / prefix).mkdir(parents=True, exist_ok=True)
            write_tensor(directory / fname, arr.reshape((1,) * (4 - arr.ndim) + arr.shape))
            mapping[nid][name] = {"file": fname, "shape": list(arr.shape)}
    return mapping


def _load(directory, mapping):
    tree = {}
    for nid, entries in mapping.items():
        tree[nid] = {name: read_tensor(directory / e["file"]).reshape(e["shape"]) for name, e in entries.items()}
    return tree


def save_checkpoint(directory, graph: ArchGraph, params, buffers, state: dict | None = None):
    """Architecture JSON, one FRTN file per tensor, and a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "arch.json").write_text(graph.to_json(indent=1))
    manifest = {
        "format": "freconv-checkpoint/1",
        "arch": "arch.json",
        "params": _store(d, "params", params),
        "buffers": _store(d, "buffers", buffers),
        "state": state or {},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory):
    """``(graph, params, buffers, state)``."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    graph = ArchGraph.from_json((d / manifest["arch"]).read_text())
    return graph, _load(d, manifest["params"]), _load(d, manifest["buffers"]), manifest.get("state", {})
