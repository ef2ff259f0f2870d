"""Scaled-down experiments shared by ``scripts/`` and the acceptance tests."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .esresnet import ModelConfig, build
from .folds import (LeakageReport, ManifestEntry, audit_split, official_folds, stratified_kfold,
                    synth_overlapped_manifest)
from .training import (EpochMetrics, EvalResult, LabeledClip, TrainConfig, TrainResult, accuracy, cross_validate,
                       tone_dataset, train)


def weights_digest(weights: dict) -> str:
    """sha256 over tensor names, shapes and bytes in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# -- overfit check -----------------------------------------------------------

@dataclass
class OverfitConfig:
    epochs: int = 50
    train_clips: int = 64
    heldout_clips: int = 32
    num_classes: int = 4
    width_scale: float = 0.125
    model_seed: int = 0
    train_seed: int = 0
    train_data_seed: int = 1
    heldout_data_seed: int = 2


@dataclass
class OverfitResult:
    train_acc: float
    heldout_acc: float
    result: TrainResult

    @property
    def digest(self) -> str:
        return weights_digest(self.result.weights)


def overfit_tones(cfg: OverfitConfig = OverfitConfig(), track_heldout: bool = False,
                  on_epoch: Callable[[EpochMetrics], None] | None = None) -> OverfitResult:
    """Train a small ESResNet on synthetic tone clusters with default hyperparameters (augmentation on)."""
    train_set = tone_dataset(cfg.train_clips, cfg.num_classes, seed=cfg.train_data_seed)
    heldout = tone_dataset(cfg.heldout_clips, cfg.num_classes, seed=cfg.heldout_data_seed)
    model = build(ModelConfig(cfg.num_classes, width_scale=cfg.width_scale), cfg.model_seed)
    result = train(model, train_set, TrainConfig(epochs=cfg.epochs, seed=cfg.train_seed),
                   val_clips=heldout if track_heldout else None, on_epoch=on_epoch)
    return OverfitResult(accuracy(model, train_set), accuracy(model, heldout), result)


# -- leakage direction ---------------------------------------------------------

@dataclass
class LeakageConfig:
    num_sources: int = 40
    snippets_per_source: int = 4
    num_classes: int = 4
    snippet_seconds: float = 0.5
    k: int = 4
    data_seed: int = 0
    split_seed: int = 0
    model_seed: int = 0
    width_scale: float = 0.125
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=30, base_lr=1e-3, warmup_low_epochs=0, warmup_ramp_epochs=1, gamma=1.0, augment=False))


@dataclass
class LeakageResult:
    official: EvalResult
    stratified: EvalResult
    official_audit: LeakageReport
    stratified_audit: LeakageReport


def leakage_clips(cfg: LeakageConfig) -> tuple[list[ManifestEntry], dict[str, LabeledClip]]:
    ds = synth_overlapped_manifest(cfg.num_sources, cfg.snippets_per_source, cfg.num_classes, cfg.data_seed,
                                   snippet_seconds=cfg.snippet_seconds, folds=cfg.k)
    clips = {e.clip_path: LabeledClip(ds.audio[e.clip_path], e.class_label, e.clip_path) for e in ds.entries}
    return ds.entries, clips


def leakage_experiment(cfg: LeakageConfig = LeakageConfig(),
                       on_round: Callable[[str, int, float], None] | None = None) -> LeakageResult:
    """Cross-validate the same model recipe under grouped and per-clip stratified folds of one overlapped set."""
    entries, clips = leakage_clips(cfg)
    model_cfg = ModelConfig(cfg.num_classes, width_scale=cfg.width_scale)
    results, audits = {}, {}
    for mode, assignment in (("official", official_folds(entries, cfg.k)),
                             ("stratified", stratified_kfold(entries, cfg.k, cfg.split_seed))):
        audits[mode] = audit_split(entries, assignment)
        report = None if on_round is None else (lambda r, acc, mode=mode: on_round(mode, r, acc))
        results[mode] = cross_validate(clips, assignment, model_cfg, cfg.train, model_seed=cfg.model_seed,
                                       on_round=report)
    return LeakageResult(results["official"], results["stratified"], audits["official"], audits["stratified"])
