"""Command-line entry point: ``gen-synth``, ``pretrain``, ``probe`` and ``ablate``.

Every verb reads an optional JSON config, writes all artifacts under ``--out``
together with ``run_manifest.json`` (resolved config plus git-style content
hashes of every input file) and reports progress on standard error only.

Config layout: top-level keys are ``TrainConfig`` fields, plus the optional
sections ``synth`` (``SynthSpec`` fields), ``data`` (``manifest``,
``embeddings``, ``n_train``), ``probe`` (``ProbeConfig`` fields plus
``checkpoint``) and ``ablate`` (``seeds``, ``variants``). Relative paths are
resolved against the config file's directory.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    ManifestError,
    SynthSpec,
    generate_synthetic,
    label_matrix,
    load_manifest,
    manifest_vocabulary,
    split_records,
    stack_images,
    synthetic_text_encoder,
    write_manifest,
)
from .encoders import ConfigError, TextEncoder
from .evalprobe import MetricReport, ProbeConfig, evaluate, extract_features, format_table, train_probe
from .experiments import ABLATION_VARIANTS, baseline_violations, comparison_rows, comparison_table, run_grid
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    single_threaded,
    write_history_csv,
)

log = logging.getLogger("textinfomax")

VERBS = ("gen-synth", "pretrain", "probe", "ablate")
SECTIONS = ("synth", "data", "probe", "ablate")
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# hashing ---------------------------------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    """The object id ``git hash-object`` would assign to ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_hash(hashes: dict[str, str]) -> str:
    h = hashlib.sha1()
    for name in sorted(hashes):
        h.update(f"{hashes[name]} {name}\n".encode())
    return h.hexdigest()


# config --------------------------------------------------------------------------------

class RunConfig:
    """A parsed config file split into the training config and its side sections."""

    def __init__(self, raw: dict, base_dir: Path):
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        self.raw = raw
        self.base_dir = base_dir
        self.sections = {k: dict(raw.get(k) or {}) for k in SECTIONS}
        self.train_fields = {k: v for k, v in raw.items() if k not in SECTIONS}

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls({}, Path.cwd())
        p = Path(path)
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {p}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        return cls(raw, p.resolve().parent)

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def train(self, seed: int | None) -> TrainConfig:
        cfg = TrainConfig.from_dict(self.train_fields)
        if seed is not None:
            cfg = cfg.replace(seed=seed, augment=dataclasses.replace(cfg.augment, rng_seed=seed))
        return cfg.validate()

    def synth(self, seed: int | None) -> SynthSpec:
        fields = self.sections["synth"]
        names = {f.name for f in dataclasses.fields(SynthSpec)}
        unknown = set(fields) - names
        if unknown:
            raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
        spec = SynthSpec(**fields)
        if seed is not None:
            spec = dataclasses.replace(spec, seed=seed)
        return spec.validate()

    def probe(self, seed: int | None) -> tuple[ProbeConfig, dict]:
        fields = dict(self.sections["probe"])
        extra = {k: fields.pop(k) for k in ("checkpoint",) if k in fields}
        names = {f.name for f in dataclasses.fields(ProbeConfig)}
        unknown = set(fields) - names
        if unknown:
            raise ConfigError(f"unknown probe fields: {sorted(unknown)}")
        cfg = ProbeConfig(**fields)
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        return cfg.validate(), extra


# datasets ------------------------------------------------------------------------------

class Inputs:
    """Records the files a run reads, for the run manifest."""

    def __init__(self):
        self.hashes: dict[str, str] = {}

    def add(self, path: Path, label: str | None = None) -> Path:
        self.hashes[label or str(path)] = git_blob_hash(Path(path).read_bytes())
        return path


def _dataset(rc: RunConfig, train_cfg: TrainConfig, seed: int | None, inputs: Inputs):
    """Records and text encoder from ``data.manifest``, or a fresh synthetic corpus."""
    data = rc.sections["data"]
    unknown = set(data) - {"manifest", "embeddings", "n_train"}
    if unknown:
        raise ConfigError(f"unknown data fields: {sorted(unknown)}")
    manifest = rc.path(data.get("manifest"))
    if manifest is None:
        spec = rc.synth(seed)
        if spec.image_size != train_cfg.encoder.input_size:
            raise ConfigError("synth.image_size must equal encoder.input_size")
        log.info("generating synthetic corpus: %s", spec)
        records = generate_synthetic(spec)
        encoder = synthetic_text_encoder(train_cfg.text_dim, seed=spec.seed, dtype=train_cfg.np_dtype)
        return records, encoder, data.get("n_train")

    inputs.add(manifest, "manifest")
    emb_path = rc.path(data.get("embeddings"))
    if emb_path is not None:
        inputs.add(emb_path, "embeddings")
        encoder = TextEncoder.from_file(emb_path, dtype=train_cfg.np_dtype)
    else:
        encoder = TextEncoder.random(manifest_vocabulary(manifest), dim=train_cfg.text_dim, seed=train_cfg.seed,
                                     dtype=train_cfg.np_dtype)
    records = load_manifest(manifest, encoder.vocab)
    for line in Path(manifest).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rel = json.loads(line)["image"]
            if (Path(manifest).parent / rel).exists():
                inputs.add(Path(manifest).parent / rel, f"image:{rel}")
    return records, encoder, data.get("n_train")


def _split(records, n_train):
    if n_train is None:
        n_train = len(records) // 2
    if not 0 < n_train < len(records):
        raise ConfigError(f"n_train must lie strictly between 0 and {len(records)}")
    return split_records(records, int(n_train))


# verbs -----------------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(out: Path, verb: str, resolved: dict, inputs: Inputs, outputs: Sequence[str]) -> None:
    from . import __version__

    _write_json(out / "run_manifest.json", {
        "verb": verb,
        "version": __version__,
        "config": resolved,
        "inputs": inputs.hashes,
        "inputs_hash": inputs_hash(inputs.hashes),
        "outputs": sorted(outputs),
    })


def cmd_gen_synth(args, rc: RunConfig, inputs: Inputs) -> list[str]:
    spec = rc.synth(args.seed)
    text_dim = int(rc.train_fields.get("text_dim", TrainConfig.text_dim))
    records = generate_synthetic(spec)
    write_manifest(records, args.out)
    synthetic_text_encoder(text_dim, seed=spec.seed).save(args.out / "embeddings.txt")
    log.info("wrote %d records to %s", len(records), args.out)
    _manifest(args.out, "gen-synth", {"synth": dataclasses.asdict(spec), "text_dim": text_dim}, inputs,
              ["manifest.jsonl", "embeddings.txt", "images/"])
    return ["manifest.jsonl"]


def cmd_pretrain(args, rc: RunConfig, inputs: Inputs) -> list[str]:
    cfg = rc.train(args.seed)
    records, encoder, n_train = _dataset(rc, cfg, args.seed, inputs)
    if n_train is not None:
        records = records[:int(n_train)]
    ckpt, history = pretrain(cfg, records, encoder, deterministic=args.deterministic, dump_dir=args.out)
    save_checkpoint(ckpt, args.out / "checkpoint.ckpt")
    write_history_csv(history, args.out / "loss.csv")
    log.info("pretrained %d steps, final total loss %.4f", ckpt.step, history[-1]["total"] if history else float("nan"))
    _manifest(args.out, "pretrain", {"train": cfg.to_dict(), "data": rc.sections["data"],
                                     "deterministic": args.deterministic}, inputs, ["checkpoint.ckpt", "loss.csv"])
    return ["checkpoint.ckpt", "loss.csv"]


def cmd_probe(args, rc: RunConfig, inputs: Inputs) -> list[str]:
    probe_cfg, extra = rc.probe(args.seed)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else rc.path(extra.get("checkpoint"))
    if ckpt_path is None:
        raise ConfigError("probe needs a checkpoint (--checkpoint or probe.checkpoint)")
    inputs.add(ckpt_path, "checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    records, _, n_train = _dataset(rc, ckpt.config, None, inputs)
    if any(r.labels is None for r in records):
        raise ManifestError("probing needs labels on every record")
    train, test = _split(records, n_train)
    dtype = ckpt.config.np_dtype
    with single_threaded(args.deterministic):
        x_train = extract_features(ckpt, stack_images(train, dtype))
        x_test = extract_features(ckpt, stack_images(test, dtype))
        if probe_cfg.task == "single_label":
            y_train = np.array([r.labels[0] for r in train])
            y_test = np.array([r.labels[0] for r in test])
        else:
            n_classes = 1 + max(max(r.labels) for r in records)
            y_train, y_test = label_matrix(train, n_classes), label_matrix(test, n_classes)
        probe = train_probe(x_train, y_train, probe_cfg)
        report: MetricReport = evaluate(probe, x_test, y_test)
    (args.out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (args.out / "metrics.txt").write_text(format_table({probe_cfg.kind: report}) + "\n", encoding="utf-8")
    log.info("probe metrics: %s", report.to_dict())
    _manifest(args.out, "probe", {"probe": dataclasses.asdict(probe_cfg), "data": rc.sections["data"],
                                  "n_train": len(train), "deterministic": args.deterministic},
              inputs, ["metrics.json", "metrics.txt"])
    return ["metrics.json", "metrics.txt"]


def cmd_ablate(args, rc: RunConfig, inputs: Inputs) -> list[str]:
    cfg = rc.train(None)
    probe_cfg, _ = rc.probe(None)
    section = rc.sections["ablate"]
    unknown = set(section) - {"seeds", "variants"}
    if unknown:
        raise ConfigError(f"unknown ablate fields: {sorted(unknown)}")
    seeds = [int(s) for s in section.get("seeds", [0, 1, 2])]
    if args.seed is not None:
        seeds = [args.seed + i for i in range(len(seeds))]
    names = section.get("variants", list(ABLATION_VARIANTS))
    missing = [n for n in names if n not in ABLATION_VARIANTS]
    if missing or not names or not seeds:
        raise ConfigError(f"unknown ablation variants {missing}; choose from {list(ABLATION_VARIANTS)}")
    records, encoder, n_train = _dataset(rc, cfg, None, inputs)
    train, test = _split(records, n_train)
    with single_threaded(args.deterministic):
        results = run_grid(cfg, {n: ABLATION_VARIANTS[n] for n in names}, seeds, train, test, encoder, probe_cfg,
                           progress=log.info)
    table = comparison_table(results)
    notes = baseline_violations(results) if "baseline" in results else []
    (args.out / "ablation.txt").write_text(table + "\n" + "".join(f"NOTE {n}\n" for n in notes), encoding="utf-8")
    _write_json(args.out / "ablation.json", {"rows": comparison_rows(results), "violations": notes})
    for n in notes:
        log.warning("ablation ordering: %s", n)
    _manifest(args.out, "ablate", {"train": cfg.to_dict(), "probe": dataclasses.asdict(probe_cfg), "seeds": seeds,
                                   "variants": names, "data": rc.sections["data"],
                                   "synth": rc.sections["synth"], "deterministic": args.deterministic},
              inputs, ["ablation.txt", "ablation.json"])
    return ["ablation.txt", "ablation.json"]


COMMANDS = {"gen-synth": cmd_gen_synth, "pretrain": cmd_pretrain, "probe": cmd_probe, "ablate": cmd_ablate}


# entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textinfomax", description=__doc__.splitlines()[0])
    parser.add_argument("verb", choices=VERBS, help="what to run")
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--out", required=True, help="output directory (created if missing)")
    parser.add_argument("--seed", type=int, help="seed override (takes precedence over the config)")
    parser.add_argument("--deterministic", action="store_true", help="serial single-threaded execution")
    parser.add_argument("--checkpoint", help="checkpoint to probe (overrides probe.checkpoint)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse has already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.propagate = False

    try:
        rc = RunConfig.load(args.config)
        args.out = Path(args.out)
        args.out.mkdir(parents=True, exist_ok=True)
        inputs = Inputs()
        if args.config:
            inputs.add(Path(args.config), "config")
        COMMANDS[args.verb](args, rc, inputs)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (ManifestError, CheckpointError, TrainingDivergedError, FloatingPointError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
