"""Image-caption records, JSON Lines manifests, batching and the synthetic paired corpus."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .augment import AugmentPolicy, pair_index, sample_view_pair
from .encoders import UNK, ConfigError, TextEncoder, encode_text_batch, tokenize

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


class ManifestError(ValueError):
    pass


@dataclass
class PairRecord:
    image: np.ndarray | str | Path  # [3,S,S] floats in [0,1], or a path to a PNG
    tokens: list[int]
    labels: Optional[list[int]] = None
    caption: Optional[str] = None

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ManifestError("record has no caption tokens")
        if self.labels is not None and len(self.labels) == 0:
            raise ManifestError("label set, when given, must be non-empty")

    def pixels(self) -> np.ndarray:
        if isinstance(self.image, np.ndarray):
            return self.image
        return read_png(self.image)


@dataclass
class PairBatch:
    view1: np.ndarray
    view2: np.ndarray
    text: np.ndarray | list[list[int]]
    labels: Optional[list] = None
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def size(self) -> int:
        return len(self.view1)


# image io ----------------------------------------------------------------------

def read_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()


def write_png(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# manifests ---------------------------------------------------------------------

def _read_lines(path: Path) -> list[dict]:
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON") from exc
            if "image" not in row or "caption" not in row:
                raise ManifestError(f"{path}:{lineno}: needs 'image' and 'caption' fields")
            row["_line"] = lineno
            rows.append(row)
    return rows


def manifest_vocabulary(path: str | Path) -> list[str]:
    """Sorted distinct tokens of every caption in a manifest."""
    words = set()
    for row in _read_lines(Path(path)):
        words.update(tokenize(row["caption"]))
    words.discard(UNK)
    return sorted(words)


def load_manifest(path: str | Path, vocab: dict[str, int], load_images: bool = True,
                  max_reject_fraction: float = 0.01) -> list[PairRecord]:
    """Read a JSON Lines manifest into records, in file order.

    Records with empty captions are dropped with a warning. The load fails if
    the rejected count exceeds both one record and ``max_reject_fraction`` of
    the file.
    """
    path = Path(path)
    rows = _read_lines(path)
    records, rejected = [], 0
    for row in rows:
        words = tokenize(row["caption"])
        if not words:
            log.warning("%s:%d: empty caption, record rejected", path, row["_line"])
            rejected += 1
            continue
        image_path = path.parent / row["image"]
        if not image_path.exists():
            raise ManifestError(f"{path}:{row['_line']}: image {image_path} not found")
        image = read_png(image_path) if load_images else image_path
        labels = row.get("labels")
        records.append(PairRecord(image=image, tokens=[vocab.get(w, 0) for w in words],
                                  labels=list(labels) if labels else None, caption=row["caption"]))
    if rejected > max(1, max_reject_fraction * len(rows)):
        raise ManifestError(f"{path}: {rejected} of {len(rows)} records rejected, aborting")
    return records


def write_manifest(records: Sequence[PairRecord], out_dir: str | Path, words: Sequence[str] | None = None,
                   image_dir: str = "images") -> Path:
    """Write PNGs plus ``manifest.jsonl`` under ``out_dir``; returns the manifest path.

    Captions are written verbatim when the record carries one, otherwise they
    are rebuilt from token indices through ``words``.
    """
    out_dir = Path(out_dir)
    (out_dir / image_dir).mkdir(parents=True, exist_ok=True)
    manifest = out_dir / MANIFEST_NAME
    width = max(6, len(str(len(records))))
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, rec in enumerate(records):
            rel = f"{image_dir}/{i:0{width}d}.png"
            write_png(rec.pixels(), out_dir / rel)
            caption = rec.caption
            if caption is None:
                if words is None:
                    raise ManifestError("record without caption text needs a word list")
                caption = " ".join(words[t] for t in rec.tokens)
            row = {"image": rel, "caption": caption}
            if rec.labels is not None:
                row["labels"] = [int(x) for x in rec.labels]
            fh.write(json.dumps(row) + "\n")
    return manifest


# batching ------------------------------------------------------------------------

def batch_indices(n_records: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; a final batch shorter than 2 is dropped."""
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    if n_records < 2:
        raise ConfigError("need at least 2 records to form a batch")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 0x5EED]))
    order = rng.permutation(n_records)
    batches = [order[i:i + batch_size] for i in range(0, n_records, batch_size)]
    return [b for b in batches if len(b) == batch_size or len(b) >= 2 and len(b) == n_records]


def make_batches(records: Sequence[PairRecord], batch_size: int, seed: int, epoch: int,
                 policy: AugmentPolicy | None = None, text_encoder: TextEncoder | None = None,
                 dtype=np.float64) -> Iterator[PairBatch]:
    """Yield the epoch's batches with two augmented views per record.

    Without a policy both views are the raw image. Without a text encoder the
    ``text`` field carries token lists instead of encoded vectors.
    """
    n = len(records)
    for idx in batch_indices(n, batch_size, seed, epoch):
        v1, v2 = [], []
        for i in idx:
            img = records[i].pixels()
            if policy is None:
                a = b = img
            else:
                a, b = sample_view_pair(policy, img, pair_index(epoch, int(i), n))
            v1.append(a)
            v2.append(b)
        tokens = [records[i].tokens for i in idx]
        text = encode_text_batch(text_encoder, tokens).data.astype(dtype) if text_encoder is not None else tokens
        labels = [records[i].labels for i in idx] if records[idx[0]].labels is not None else None
        yield PairBatch(np.stack(v1).astype(dtype), np.stack(v2).astype(dtype), text, labels, np.asarray(idx))


# synthetic corpus ---------------------------------------------------------------

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.15, 0.3, 0.9),
    "yellow": (0.9, 0.85, 0.15),
    "purple": (0.6, 0.2, 0.75),
    "orange": (0.95, 0.55, 0.1),
}
COUNTS = ("one", "two", "three")
FILLER = ("a", "the", "of", "with", "and", "photo", "picture", "image", "on", "in", "background",
          "shot", "view", "some", "here", "this", "small", "big", "dark", "scene")


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 10
    n_samples: int = 2000
    image_size: int = 32
    overlap: float = 0.9
    caption_len: int = 8
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if not 0 <= self.overlap <= 1:
            raise ConfigError("overlap must lie in [0, 1]")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.n_classes > len(SHAPES) * len(COLORS) * len(COUNTS):
            raise ConfigError(f"n_classes {self.n_classes} exceeds the {len(SHAPES) * len(COLORS) * len(COUNTS)} "
                              "available (shape, colour, count) combinations")
        if self.n_samples < self.n_classes or self.caption_len < 1 or self.image_size < 8:
            raise ConfigError("n_samples >= n_classes, caption_len >= 1 and image_size >= 8 required")
        return self


def synthetic_vocabulary() -> list[str]:
    """Caption words, without the reserved unknown token."""
    return list(SHAPES) + list(COLORS) + list(COUNTS) + list(FILLER)


def synthetic_text_encoder(dim: int = 300, seed: int = 0, dtype=np.float64) -> TextEncoder:
    return TextEncoder.random(synthetic_vocabulary(), dim=dim, seed=seed, dtype=dtype)


def class_attributes(n_classes: int, seed: int) -> list[tuple[str, str, str]]:
    combos = list(itertools.product(SHAPES, COLORS, COUNTS))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A5]))
    return [combos[i] for i in rng.permutation(len(combos))[:n_classes]]


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # upward triangle: apex at top, base at cy + r
    dy = yy - (cy - r)
    return (dy >= 0) & (yy <= cy + r) & (np.abs(xx - cx) <= dy * 0.6)


def render(shape: str, color: str, count: int, size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.05, 0.45)
    img = base + rng.normal(0.0, 0.04, size=(3, size, size))
    img += rng.uniform(-0.05, 0.05, size=(3, 1, 1))
    rgb = np.asarray(COLORS[color]) + rng.uniform(-0.08, 0.08, size=3)
    for _ in range(count):
        r = rng.uniform(size / 9, size / 5.5)
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = _shape_mask(shape, size, cy, cx, r)
        img[:, mask] = rgb[:, None] + rng.normal(0.0, 0.03, size=(3, int(mask.sum())))
    # snap to the 8-bit grid so PNG round-trips are exact
    return np.rint(np.clip(img, 0, 1) * 255.0) / 255.0


def generate_synthetic(spec: SynthSpec) -> list[PairRecord]:
    """Rendered shape images with captions of tunable truthfulness.

    A class is a (shape, colour, count) triple. Caption position k carries,
    with probability ``overlap``, the class's attribute word number ``k % 3``;
    otherwise a word drawn uniformly from the whole vocabulary.
    """
    spec.validate()
    words = synthetic_vocabulary()
    index = {w: i + 1 for i, w in enumerate(words)}  # row 0 is <unk>
    classes = class_attributes(spec.n_classes, spec.seed)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA7A]))
    labels = rng.permutation(np.arange(spec.n_samples) % spec.n_classes)
    records = []
    for label in labels:
        shape, color, count = classes[label]
        img = render(shape, color, COUNTS.index(count) + 1, spec.image_size, rng)
        truth = (color, shape, count)
        caption = []
        for k in range(spec.caption_len):
            if rng.random() < spec.overlap:
                caption.append(truth[k % 3])
            else:
                caption.append(words[rng.integers(len(words))])
        records.append(PairRecord(image=img, tokens=[index[w] for w in caption], labels=[int(label)],
                                  caption=" ".join(caption)))
    return records


def plugin_mutual_information(xs: Sequence[int], ys: Sequence[int]) -> float:
    """Plug-in estimate of I(X;Y) in nats from paired discrete samples."""
    xs, ys = np.asarray(xs), np.asarray(ys)
    _, xi = np.unique(xs, return_inverse=True)
    _, yi = np.unique(ys, return_inverse=True)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))


def split_records(records: Sequence[PairRecord], n_first: int) -> tuple[list[PairRecord], list[PairRecord]]:
    return list(records[:n_first]), list(records[n_first:])


def stack_images(records: Sequence[PairRecord], dtype=np.float64) -> np.ndarray:
    return np.stack([r.pixels() for r in records]).astype(dtype)


def label_matrix(records: Sequence[PairRecord], n_classes: int) -> np.ndarray:
    """Multi-hot [N, n_classes] matrix of record labels."""
    out = np.zeros((len(records), n_classes), dtype=np.int64)
    for i, r in enumerate(records):
        out[i, r.labels] = 1
    return out
