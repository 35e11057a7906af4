"""Multiscale convolutional image encoder and frozen mean-of-embeddings text encoder."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

UNK = "<unk>"
SUPPORTED_SIZES = (32, 64, 128)


class ConfigError(ValueError):
    """A configuration violates its invariants."""


class EmptyTextError(ValueError):
    pass


@dataclass(frozen=True)
class ImageEncoderConfig:
    ndf: int = 16
    nrkhs: int = 64
    ndepth: int = 1
    input_size: int = 32

    def validate(self) -> "ImageEncoderConfig":
        if self.ndf < 8:
            raise ConfigError(f"ndf must be >= 8, got {self.ndf}")
        if self.nrkhs < self.ndf:
            raise ConfigError(f"nrkhs ({self.nrkhs}) must be >= ndf ({self.ndf})")
        if self.ndepth < 1:
            raise ConfigError("ndepth must be >= 1")
        if self.input_size not in SUPPORTED_SIZES:
            raise ConfigError(f"input_size must be one of {SUPPORTED_SIZES}, got {self.input_size}")
        return self

    @property
    def n_stages(self) -> int:
        # number of stride-2 stages needed to bring input_size down to 8
        return int(math.log2(self.input_size // 8))


@dataclass
class MultiscaleFeatures:
    f1: Tensor  # [B, nrkhs]
    f5: Tensor  # [B, nrkhs, 5, 5]
    f7: Tensor  # [B, nrkhs, 7, 7]

    @property
    def batch_size(self) -> int:
        return self.f1.shape[0]

    def taps(self) -> dict[str, Tensor]:
        return {"f1": self.f1, "f5": self.f5, "f7": self.f7}


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    # He-uniform: keeps activation variance roughly constant through relu layers
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_params(rng, name, c_in, c_out, k, dtype, gain=1.0):
    fan_in = c_in * k * k
    return {
        f"{name}.w": Tensor(gain * _uniform(rng, (c_out, c_in, k, k), fan_in, dtype), requires_grad=True),
        f"{name}.b": Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
    }


class ImageEncoder:
    """Residual convolutional encoder with 7x7, 5x5 and 1x1 taps.

    Resolution is halved by stride-2 stages until an 8x8 map remains; a 2x2
    valid conv gives the 7x7 tap, a 3x3 valid conv the 5x5 tap and a global
    average pool the 1x1 tap. Each tap gets its own 1x1 projection to
    ``nrkhs`` channels.
    """

    def __init__(self, config: ImageEncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def stage_widths(self) -> list[int]:
        ndf = self.config.ndf
        return [ndf * 2 ** min(i, 2) for i in range(self.config.n_stages)]

    def __call__(self, images) -> MultiscaleFeatures:
        return encode_image(self, images)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(arrays[k], dtype=p.dtype)

    def astype(self, dtype) -> "ImageEncoder":
        params = {k: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad) for k, p in self.params.items()}
        return ImageEncoder(self.config, params)


def build_image_encoder(config: ImageEncoderConfig, seed: int, dtype=np.float64) -> ImageEncoder:
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    c_in = 3
    widths = [config.ndf * 2 ** min(i, 2) for i in range(config.n_stages)]
    for s, width in enumerate(widths):
        params.update(_conv_params(rng, f"stage{s}.down", c_in, width, 4, dtype))
        for d in range(config.ndepth):
            params.update(_conv_params(rng, f"stage{s}.res{d}.a", width, width, 3, dtype))
            # residual branches start small so the untrained net is close to its skip path
            params.update(_conv_params(rng, f"stage{s}.res{d}.b", width, width, 3, dtype, gain=0.5))
        c_in = width
    params.update(_conv_params(rng, "tap7.conv", c_in, c_in, 2, dtype))
    params.update(_conv_params(rng, "tap5.conv", c_in, c_in, 3, dtype))
    for tap in ("f1", "f5", "f7"):
        params.update(_conv_params(rng, f"proj.{tap}", c_in, config.nrkhs, 1, dtype))
    return ImageEncoder(config, params)


def _conv(params, name, x, stride=1, padding=0):
    return nx.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=padding)


def encode_image(encoder: ImageEncoder, images) -> MultiscaleFeatures:
    """Encode a [B,3,S,S] batch into the three projected taps."""
    p = encoder.params
    cfg = encoder.config
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=p["proj.f1.w"].dtype))
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise nx.DimensionError(f"expected images [B,3,{cfg.input_size},{cfg.input_size}], got {x.shape}")
    if x.shape[0] < 1:
        raise nx.DimensionError("empty image batch")

    h = x
    for s in range(cfg.n_stages):
        h = nx.relu(_conv(p, f"stage{s}.down", h, stride=2, padding=1))
        for d in range(cfg.ndepth):
            r = nx.relu(_conv(p, f"stage{s}.res{d}.a", h, padding=1))
            r = _conv(p, f"stage{s}.res{d}.b", r, padding=1)
            h = nx.relu(h + r)
    h7 = nx.relu(_conv(p, "tap7.conv", h))
    h5 = nx.relu(_conv(p, "tap5.conv", h7))
    h1 = nx.pool_avg(h5, 5, 5)

    f7 = _conv(p, "proj.f7", h7)
    f5 = _conv(p, "proj.f5", h5)
    f1 = _conv(p, "proj.f1", h1)
    f1 = f1.reshape(f1.shape[0], cfg.nrkhs)
    return MultiscaleFeatures(f1=f1, f5=f5, f7=f7)


# text ------------------------------------------------------------------------

_SPLIT = re.compile(r"[^0-9a-z']+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation."""
    return [tok for tok in _SPLIT.split(text.lower()) if tok]


class TextEncoder:
    """Arithmetic mean of frozen word-embedding rows.

    Row 0 is reserved for unknown tokens.
    """

    def __init__(self, vocab: dict[str, int], table: np.ndarray):
        if vocab.get(UNK) != 0:
            raise ConfigError("vocabulary must map <unk> to row 0")
        if table.shape[0] != len(vocab):
            raise ConfigError("embedding table rows must match vocabulary size")
        self.vocab = dict(vocab)
        self.embedding = Tensor(np.array(table), requires_grad=False)
        self.embedding.data.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def words(self) -> list[str]:
        return sorted(self.vocab, key=self.vocab.__getitem__)

    def token_ids(self, text: str | Sequence[str]) -> list[int]:
        words = tokenize(text) if isinstance(text, str) else list(text)
        return [self.vocab.get(w, 0) for w in words]

    @classmethod
    def random(cls, words: Iterable[str], dim: int = 300, seed: int = 0, dtype=np.float64) -> "TextEncoder":
        vocab = {UNK: 0}
        for w in words:
            if w not in vocab:
                vocab[w] = len(vocab)
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((len(vocab), dim)).astype(dtype) / math.sqrt(dim)
        return cls(vocab, table)

    @classmethod
    def from_file(cls, path: str | Path, dtype=np.float64) -> "TextEncoder":
        """Read ``token v1 ... v_d`` lines (UTF-8). A missing ``<unk>`` row is zero."""
        words, rows = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if not parts or not parts[0]:
                    continue
                try:
                    rows.append([float(v) for v in parts[1:]])
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: bad embedding value") from exc
                words.append(parts[0])
        if not rows:
            raise ConfigError(f"{path}: no embeddings")
        dim = len(rows[0])
        if any(len(r) != dim for r in rows):
            raise ConfigError(f"{path}: ragged embedding rows")
        if UNK in words:
            i = words.index(UNK)
            words.insert(0, words.pop(i))
            rows.insert(0, rows.pop(i))
        else:
            words.insert(0, UNK)
            rows.insert(0, [0.0] * dim)
        vocab = {w: i for i, w in enumerate(words)}
        return cls(vocab, np.asarray(rows, dtype=dtype))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for word in self.words:
                row = self.embedding.data[self.vocab[word]]
                fh.write(word + " " + " ".join(repr(float(v)) for v in row) + "\n")


def encode_text(text_encoder: TextEncoder, tokens: Sequence[int]) -> np.ndarray:
    """Mean embedding of a token-index sequence."""
    idx = np.asarray(list(tokens), dtype=np.int64)
    if idx.size == 0:
        raise EmptyTextError("cannot encode an empty token sequence")
    table = text_encoder.embedding.data
    idx = np.where((idx >= 0) & (idx < table.shape[0]), idx, 0)
    return table[idx].mean(axis=0)


def encode_text_batch(text_encoder: TextEncoder, batch: Sequence[Sequence[int]], dtype=None) -> Tensor:
    rows = np.stack([encode_text(text_encoder, toks) for toks in batch])
    return Tensor(rows.astype(dtype) if dtype is not None else rows)


def config_dict(config: ImageEncoderConfig) -> dict:
    return asdict(config)
