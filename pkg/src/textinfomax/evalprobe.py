"""Frozen-encoder evaluation: feature extraction, linear/MLP probes and metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import numerics as nx
from .encoders import ConfigError, encode_image
from .numerics import Adam, Tensor
from .trainer import Checkpoint

PROBE_KINDS = ("linear", "mlp")
TASKS = ("single_label", "multi_label")


@dataclass(frozen=True)
class ProbeConfig:
    kind: str = "linear"
    task: str = "single_label"
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    hidden: Optional[int] = None  # mlp width; defaults to the feature dimension
    standardize: bool = True

    def validate(self) -> "ProbeConfig":
        if self.kind not in PROBE_KINDS:
            raise ConfigError(f"probe kind must be one of {PROBE_KINDS}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("epochs >= 0, lr > 0 and batch_size >= 1 required")
        return self


@dataclass
class MetricReport:
    top1: Optional[float] = None
    f1_sample: Optional[float] = None
    f1_micro: Optional[float] = None
    f1_macro: Optional[float] = None
    f1_weighted: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# features ---------------------------------------------------------------------

def extract_features(checkpoint: Checkpoint, images, batch_size: int = 256) -> Tensor:
    """Global (1x1 tap) features of un-augmented images; records no gradients.

    The encoder is rebuilt from copies of the checkpoint arrays, so the
    checkpoint itself is never touched.
    """
    encoder = checkpoint.image_encoder(trainable=False)
    dtype = checkpoint.config.np_dtype
    images = np.asarray(images)
    size = checkpoint.config.encoder.input_size
    if images.ndim != 4 or images.shape[1:] != (3, size, size):
        raise nx.DimensionError(f"expected images [N,3,{size},{size}], got {images.shape}")
    chunks = []
    for start in range(0, len(images), batch_size):
        feats = encode_image(encoder, Tensor(images[start:start + batch_size].astype(dtype)))
        chunks.append(feats.f1.data)
    return Tensor(np.concatenate(chunks).astype(np.float64))


# probes ------------------------------------------------------------------------

class Probe:
    def __init__(self, cfg: ProbeConfig, params: dict[str, Tensor], n_outputs: int,
                 mean: np.ndarray, scale: np.ndarray):
        self.cfg = cfg
        self.params = params
        self.n_outputs = n_outputs
        self.mean = mean
        self.scale = scale

    def logits(self, features) -> Tensor:
        x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
        x = Tensor((x - self.mean) / self.scale)
        p = self.params
        if self.cfg.kind == "mlp":
            x = nx.relu(nx.linear(x, p["hidden.w"], p["hidden.b"]))
        return nx.linear(x, p["out.w"], p["out.b"])

    def predict(self, features) -> np.ndarray:
        z = self.logits(features).data
        if self.cfg.task == "single_label":
            return z.argmax(axis=1)
        return (z >= 0.0).astype(np.int64)  # sigmoid(z) >= 0.5


def _init_probe(cfg: ProbeConfig, dim: int, n_out: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)

    def layer(name, fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return {f"{name}.w": Tensor(rng.uniform(-bound, bound, (fan_out, fan_in)), requires_grad=True),
                f"{name}.b": Tensor(np.zeros(fan_out), requires_grad=True)}

    if cfg.kind == "mlp":
        hidden = cfg.hidden or dim
        return {**layer("hidden", dim, hidden), **layer("out", hidden, n_out)}
    return layer("out", dim, n_out)


def _probe_loss(probe: Probe, x: np.ndarray, y: np.ndarray) -> Tensor:
    z = probe.logits(x)
    if probe.cfg.task == "single_label":
        logp = nx.log_softmax(z, axis=1)
        onehot = np.zeros(z.shape)
        onehot[np.arange(len(y)), y] = 1.0
        return -(logp * onehot).sum() * (1.0 / len(y))
    # sigmoid binary cross-entropy: softplus(z) - y z
    return (nx.softplus(z) - z * y.astype(np.float64)).sum() * (1.0 / len(y))


def train_probe(features, labels, cfg: ProbeConfig = ProbeConfig()) -> Probe:
    """Fit a linear or one-hidden-layer probe on fixed features with Adam."""
    cfg.validate()
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise nx.DimensionError(f"{len(x)} feature rows but {len(y)} labels")
    if cfg.task == "single_label":
        y = y.astype(np.int64).reshape(-1)
        if len(np.unique(y)) < 2:
            raise ConfigError("single-label probe needs at least two classes")
        n_out = int(y.max()) + 1
    else:
        if y.ndim != 2:
            raise nx.DimensionError("multi-label targets must be an [N, C] indicator matrix")
        n_out = y.shape[1]

    if cfg.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale < 1e-12] = 1.0
    else:
        mean, scale = np.zeros(x.shape[1]), np.ones(x.shape[1])
    probe = Probe(cfg, _init_probe(cfg, x.shape[1], n_out), n_out, mean, scale)
    opt = Adam(probe.params, lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9B0BE]))
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            _probe_loss(probe, x[idx], y[idx]).backward()
            opt.step()
    return probe


# metrics ------------------------------------------------------------------------

def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else float(2 * tp / denom)


def f1_scores(y_true, y_pred) -> dict[str, float]:
    """Sample, micro, macro and support-weighted F1 of [N, C] indicator matrices.

    A class (or example) with no true and no predicted labels scores 0.
    """
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    if t.shape != p.shape or t.ndim != 2:
        raise nx.DimensionError("y_true and y_pred must be [N, C] matrices of equal shape")
    if t.shape[0] == 0:
        raise ValueError("empty evaluation set")
    tp = (t & p).sum(axis=0).astype(float)
    fp = (~t & p).sum(axis=0).astype(float)
    fn = (t & ~p).sum(axis=0).astype(float)
    per_class = np.array([_f1(a, b, c) for a, b, c in zip(tp, fp, fn)])
    support = t.sum(axis=0).astype(float)

    tp_s = (t & p).sum(axis=1).astype(float)
    fp_s = (~t & p).sum(axis=1).astype(float)
    fn_s = (t & ~p).sum(axis=1).astype(float)
    per_sample = np.array([_f1(a, b, c) for a, b, c in zip(tp_s, fp_s, fn_s)])

    return {
        "f1_sample": float(per_sample.mean()),
        "f1_micro": _f1(tp.sum(), fp.sum(), fn.sum()),
        "f1_macro": float(per_class.mean()),
        "f1_weighted": float((per_class * support).sum() / support.sum()) if support.sum() > 0 else 0.0,
    }


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes), dtype=np.int64)
    out[np.arange(len(labels)), labels] = 1
    return out


def evaluate(probe: Probe, features, labels, task: str | None = None) -> MetricReport:
    task = task or probe.cfg.task
    if task != probe.cfg.task:
        raise ConfigError(f"probe was trained for {probe.cfg.task}, asked to evaluate {task}")
    y = np.asarray(labels)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    pred = probe.predict(features)
    return metrics_from_predictions(y, pred, task, probe.n_outputs)


def metrics_from_predictions(y, pred, task: str, n_classes: int) -> MetricReport:
    if task == "single_label":
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if len(y) == 0:
            raise ValueError("empty evaluation set")
        n = max(n_classes, int(y.max()) + 1, int(pred.max()) + 1)
        return MetricReport(top1=float(np.mean(pred == y)), **f1_scores(one_hot(y, n), one_hot(pred, n)))
    return MetricReport(**f1_scores(y, pred))


def format_table(rows: Mapping[str, MetricReport | Mapping[str, float]], columns: Sequence[str] | None = None) -> str:
    """Aligned plain-text table, one row per named report."""
    dicts = {name: (r.to_dict() if isinstance(r, MetricReport) else dict(r)) for name, r in rows.items()}
    if columns is None:
        columns = []
        for d in dicts.values():
            columns += [c for c in d if c not in columns]
    name_w = max([len("variant")] + [len(n) for n in dicts])
    widths = [max(len(c), 8) for c in columns]
    lines = ["  ".join(["variant".ljust(name_w)] + [c.rjust(w) for c, w in zip(columns, widths)])]
    lines.append("  ".join(["-" * name_w] + ["-" * w for w in widths]))
    for name, d in dicts.items():
        cells = []
        for c, w in zip(columns, widths):
            v = d.get(c)
            cells.append(("-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)).rjust(w))
        lines.append("  ".join([name.ljust(name_w)] + cells))
    return "\n".join(lines)
