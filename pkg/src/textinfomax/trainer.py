"""Pretraining loop, run configuration and binary checkpoints."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .augment import AugmentPolicy
from .data import PairRecord, make_batches
from .encoders import ConfigError, ImageEncoder, ImageEncoderConfig, TextEncoder, build_image_encoder, encode_image
from .numerics import AdamState, Tensor, adam_step
from .objectives import LossConfig, ProjectionHeads, inter_modality_loss, intra_infomax_loss, total_loss

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"TXIMCKPT"
_DTYPES = {"float32": np.float32, "float64": np.float64}


class CheckpointError(IOError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    encoder: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    batch_size: int = 64
    epochs: int = 5
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    log_every: int = 10
    text_dim: int = 300
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        self.encoder.validate()
        self.loss.validate()
        self.augment.validate()
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lr <= 0 or self.adam_eps <= 0 or self.weight_decay < 0:
            raise ConfigError("lr and adam_eps must be positive, weight_decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.text_dim < 1 or self.log_every < 1:
            raise ConfigError("text_dim and log_every must be positive")
        return self

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        sub = {"encoder": ImageEncoderConfig, "loss": LossConfig, "augment": AugmentPolicy}
        kwargs = {}
        for key, value in raw.items():
            if key in sub:
                kwargs[key] = _build(sub[key], value)
            elif key in {f.name for f in dataclasses.fields(cls)}:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown TrainConfig field {key!r}")
        return cls(**kwargs).validate()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _build(kind, value):
    if isinstance(value, kind):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"{kind.__name__} must be given as an object")
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} fields: {sorted(unknown)}")
    value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    try:
        return kind(**value)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class Checkpoint:
    config: TrainConfig
    encoder: dict[str, np.ndarray]
    heads: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam: AdamState
    epoch: int = 0          # epochs fully completed
    step: int = 0           # optimisation steps taken
    history: list[dict] = field(default_factory=list)
    rng: dict = field(default_factory=dict)

    def image_encoder(self, trainable: bool = False) -> ImageEncoder:
        params = {k: Tensor(np.array(v), requires_grad=trainable) for k, v in self.encoder.items()}
        return ImageEncoder(self.config.encoder, params)

    def projection_heads(self) -> ProjectionHeads:
        heads = ProjectionHeads.create(self.config.text_dim, self.config.encoder.nrkhs,
                                       use_bn=self.config.loss.use_bn, dtype=self.config.np_dtype)
        for k, p in heads.params.items():
            p.data = np.array(self.heads[k])
        for stage, rs in heads.running.items():
            rs.mean[...] = self.buffers[f"{stage}.running_mean"]
            rs.var[...] = self.buffers[f"{stage}.running_var"]
        return heads


# model state ---------------------------------------------------------------------

class _Model:
    def __init__(self, config: TrainConfig):
        dtype = config.np_dtype
        self.config = config
        self.encoder = build_image_encoder(config.encoder, seed=config.seed, dtype=dtype)
        self.heads = ProjectionHeads.create(config.text_dim, config.encoder.nrkhs, seed=config.seed + 1,
                                            use_bn=config.loss.use_bn, dtype=dtype)
        self.adam = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps,
                              weight_decay=config.weight_decay)

    def trainable(self) -> dict[str, Tensor]:
        params = {f"encoder.{k}": p for k, p in self.encoder.params.items()}
        if self.config.loss.lambda_inter > 0:
            params.update({f"heads.{k}": p for k, p in self.heads.params.items()})
        return params

    def restore(self, ckpt: Checkpoint) -> None:
        self.encoder.load_state_dict(ckpt.encoder)
        for k, p in self.heads.params.items():
            p.data = np.array(ckpt.heads[k], dtype=p.dtype)
        for stage, rs in self.heads.running.items():
            rs.mean[...] = ckpt.buffers[f"{stage}.running_mean"]
            rs.var[...] = ckpt.buffers[f"{stage}.running_var"]
        self.adam = dataclasses.replace(ckpt.adam, m={k: v.copy() for k, v in ckpt.adam.m.items()},
                                        v={k: v.copy() for k, v in ckpt.adam.v.items()})

    def snapshot(self, epoch: int, step: int, history: list[dict]) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            encoder={k: p.data.copy() for k, p in self.encoder.params.items()},
            heads={k: p.data.copy() for k, p in self.heads.params.items()},
            buffers={k: v.copy() for k, v in self.heads.buffers().items()},
            adam=dataclasses.replace(self.adam, m={k: v.copy() for k, v in self.adam.m.items()},
                                     v={k: v.copy() for k, v in self.adam.v.items()}),
            epoch=epoch, step=step, history=[dict(h) for h in history],
            rng={"scheme": "SeedSequence", "batch_seed": self.config.seed,
                 "augment_seed": self.config.augment.rng_seed, "next_epoch": epoch},
        )


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    """Limit BLAS/OpenMP pools to one thread for bitwise reproducibility."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scikit-learn
        yield
        return
    with threadpool_limits(limits=1):
        yield


def train_step(model: _Model, batch, cfg: TrainConfig) -> dict:
    dtype = cfg.np_dtype
    feats1 = encode_image(model.encoder, Tensor(batch.view1.astype(dtype, copy=False)))
    feats2 = encode_image(model.encoder, Tensor(batch.view2.astype(dtype, copy=False)))
    intra = intra_infomax_loss(feats1, feats2)
    if cfg.loss.lambda_inter > 0:
        model.heads.train()
        inter = inter_modality_loss(model.heads, Tensor(np.asarray(batch.text, dtype=dtype)), feats1, cfg.loss)
    else:
        inter = Tensor(np.zeros((), dtype=dtype))
    total = total_loss(intra, inter, cfg.loss)
    params = model.trainable()
    for p in params.values():
        p.grad = None
    total.backward()
    adam_step(params, {k: p.grad for k, p in params.items()}, model.adam)
    return {"intra": float(intra.data), "inter": float(inter.data), "total": float(total.data)}


def pretrain(
    config: TrainConfig,
    records: Sequence[PairRecord],
    text_encoder: TextEncoder,
    resume: Checkpoint | None = None,
    stop_after_epoch: int | None = None,
    on_epoch_end: Callable[[int, Checkpoint], None] | None = None,
    deterministic: bool = True,
    dump_dir: str | Path | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Self-supervised pretraining; returns the final checkpoint and loss history.

    ``stop_after_epoch`` ends the run early (for checkpoint/resume);
    ``resume`` continues from a checkpoint produced by this function.
    """
    config.validate()
    if not records:
        raise ConfigError("empty dataset")
    if len(records) < config.batch_size:
        raise ConfigError(f"need at least batch_size={config.batch_size} records, got {len(records)}")
    if text_encoder.dim != config.text_dim:
        raise ConfigError(f"text encoder dim {text_encoder.dim} != config.text_dim {config.text_dim}")
    frozen_before = text_encoder.embedding.data.copy()

    model = _Model(config)
    history: list[dict] = []
    start_epoch, step = 0, 0
    if resume is not None:
        if resume.config != config:
            raise CheckpointError("checkpoint was produced with a different configuration")
        model.restore(resume)
        history = [dict(h) for h in resume.history]
        start_epoch, step = resume.epoch, resume.step

    last_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    with single_threaded(deterministic):
        for epoch in range(start_epoch, last_epoch):
            for batch in make_batches(records, config.batch_size, config.seed, epoch, config.augment,
                                      text_encoder, dtype=config.np_dtype):
                try:
                    parts = train_step(model, batch, config)
                except nx.NumericError as exc:
                    _dump(dump_dir, epoch, step, history, exc)
                    raise TrainingDivergedError(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
                step += 1
                history.append({"step": step, "epoch": epoch, **parts})
                if step % config.log_every == 0:
                    log.info("epoch %d step %d intra %.4f inter %.4f total %.4f",
                             epoch, step, parts["intra"], parts["inter"], parts["total"])
            if on_epoch_end is not None:
                on_epoch_end(epoch, model.snapshot(epoch + 1, step, history))

    if not np.array_equal(frozen_before, text_encoder.embedding.data):
        raise AssertionError("text embedding table changed during pretraining")
    return model.snapshot(last_epoch, step, history), history


def _dump(dump_dir, epoch, step, history, exc) -> None:
    if dump_dir is None:
        return
    path = Path(dump_dir)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "divergence.json", "w") as fh:
        json.dump({"epoch": epoch, "step": step, "error": str(exc), "recent": history[-20:]}, fh, indent=2)


# loss history --------------------------------------------------------------------

def write_history_csv(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "intra", "inter", "total"])
        for row in history:
            writer.writerow([row["step"], repr(row["intra"]), repr(row["inter"]), repr(row["total"])])


def read_history_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), "intra": float(r["intra"]), "inter": float(r["inter"]),
                 "total": float(r["total"])} for r in csv.DictReader(fh)]


# checkpoint file -------------------------------------------------------------------
#
# layout (little-endian):
#   8s magic | u32 version | u64 header length | header JSON | array blobs | sha256 of all preceding bytes

def _arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = {}
    out.update({f"encoder/{k}": v for k, v in ckpt.encoder.items()})
    out.update({f"heads/{k}": v for k, v in ckpt.heads.items()})
    out.update({f"buffers/{k}": v for k, v in ckpt.buffers.items()})
    out.update({f"adam.m/{k}": v for k, v in ckpt.adam.m.items()})
    out.update({f"adam.v/{k}": v for k, v in ckpt.adam.v.items()})
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = _arrays(ckpt)
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    adam = {k: getattr(ckpt.adam, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "adam": adam,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "history": ckpt.history,
        "rng": ckpt.rng,
        "arrays": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    blob = body[start + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        chunk = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))

    def group(prefix):
        return {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}

    config = TrainConfig.from_dict(header["config"])
    adam = AdamState(**header["adam"], m=group("adam.m"), v=group("adam.v"))
    return Checkpoint(config=config, encoder=group("encoder"), heads=group("heads"), buffers=group("buffers"),
                      adam=adam, epoch=header["epoch"], step=header["step"], history=header["history"],
                      rng=header["rng"])


def parameter_digest(ckpt: Checkpoint) -> str:
    """sha256 over every stored array, for frozen-state checks."""
    h = hashlib.sha256()
    for name, arr in sorted(_arrays(ckpt).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
