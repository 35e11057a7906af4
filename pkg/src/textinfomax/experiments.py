"""Pretrain-then-probe comparisons over loss variants with shared seeds."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import PairRecord, stack_images
from .encoders import TextEncoder
from .evalprobe import MetricReport, ProbeConfig, evaluate, extract_features, format_table, train_probe
from .trainer import Checkpoint, TrainConfig, pretrain

log = logging.getLogger(__name__)

# name -> LossConfig overrides applied on top of the base run
ABLATION_VARIANTS: dict[str, dict] = {
    "baseline": {},
    "w/o BN": {"use_bn": False},
    "w/o Local": {"use_local": False},
    "w/o V2T": {"use_v2t": False},
    "nce-inter": {"inter_kind": "nce"},
    "intra-only": {"lambda_inter": 0.0},
}


@dataclass
class VariantResult:
    name: str
    seeds: list[int]
    top1: list[float] = field(default_factory=list)
    final_loss: list[float] = field(default_factory=list)

    @property
    def mean_top1(self) -> float:
        return float(np.mean(self.top1))

    @property
    def std_top1(self) -> float:
        return float(np.std(self.top1))


def variant_config(base: TrainConfig, overrides: dict, seed: int) -> TrainConfig:
    loss = dataclasses.replace(base.loss, **overrides)
    augment = dataclasses.replace(base.augment, rng_seed=seed)
    return base.replace(loss=loss, augment=augment, seed=seed)


def probe_accuracy(ckpt: Checkpoint, train: Sequence[PairRecord], test: Sequence[PairRecord],
                   probe_cfg: ProbeConfig) -> MetricReport:
    dtype = ckpt.config.np_dtype
    x_train = extract_features(ckpt, stack_images(train, dtype))
    x_test = extract_features(ckpt, stack_images(test, dtype))
    y_train = np.array([r.labels[0] for r in train])
    y_test = np.array([r.labels[0] for r in test])
    probe = train_probe(x_train, y_train, probe_cfg)
    return evaluate(probe, x_test, y_test)


def run_variant(name: str, base: TrainConfig, overrides: dict, seeds: Sequence[int],
                train: Sequence[PairRecord], test: Sequence[PairRecord], text_encoder: TextEncoder,
                probe_cfg: ProbeConfig, progress: Callable[[str], None] | None = None) -> VariantResult:
    result = VariantResult(name, list(seeds))
    for seed in seeds:
        cfg = variant_config(base, overrides, seed)
        ckpt, history = pretrain(cfg, train, text_encoder)
        report = probe_accuracy(ckpt, train, test, dataclasses.replace(probe_cfg, seed=seed))
        result.top1.append(report.top1)
        result.final_loss.append(history[-1]["total"])
        if progress is not None:
            progress(f"{name} seed={seed} top1={report.top1:.4f}")
    return result


def run_grid(base: TrainConfig, variants: dict[str, dict], seeds: Sequence[int], train, test,
             text_encoder: TextEncoder, probe_cfg: ProbeConfig,
             progress: Callable[[str], None] | None = None) -> dict[str, VariantResult]:
    return {name: run_variant(name, base, ov, seeds, train, test, text_encoder, probe_cfg, progress)
            for name, ov in variants.items()}


def comparison_rows(results: dict[str, VariantResult]) -> dict[str, dict]:
    rows = {}
    for name, r in results.items():
        row = {"mean_top1": r.mean_top1, "std_top1": r.std_top1}
        row.update({f"seed{s}": acc for s, acc in zip(r.seeds, r.top1)})
        rows[name] = row
    return rows


def comparison_table(results: dict[str, VariantResult]) -> str:
    return format_table(comparison_rows(results))


def baseline_violations(results: dict[str, VariantResult], baseline: str = "baseline",
                        against: Sequence[str] = ("w/o BN", "w/o Local", "w/o V2T")) -> list[str]:
    """Human-readable notes for every ablation that beat the baseline."""
    notes = []
    base = results[baseline]
    for name in against:
        if name in results and results[name].mean_top1 > base.mean_top1:
            r = results[name]
            notes.append(f"{name} mean top1 {r.mean_top1:.4f} > {baseline} {base.mean_top1:.4f} "
                         f"(seeds {r.seeds}: {[round(a, 4) for a in r.top1]} vs {[round(a, 4) for a in base.top1]})")
    return notes
