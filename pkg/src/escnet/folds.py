"""Dataset manifests, official and stratified splits, and the source-leakage auditor.

A source recording cut into overlapping snippets must sit entirely on one
side of every train/test divide. Official folds guarantee this by grouping
on ``source_id``; a per-clip stratified split does not, and
:func:`audit_split` reports every source that ends up on both sides.
"""
from __future__ import annotations

import csv
import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_COLUMNS = ("clip_path", "class_label", "fold_id", "source_id", "snippet_index")


class ManifestError(ValueError):
    pass


class SchemaError(ManifestError):
    pass


class IntegrityError(ManifestError):
    pass


class FoldRangeError(ManifestError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    clip_path: str
    class_label: int
    fold_id: int
    source_id: str
    snippet_index: int


@dataclass
class SplitAssignment:
    """Per-round test sets; the training set of a round is the complement."""

    clip_ids: tuple[str, ...]
    test_sets: list[frozenset[str]]

    @property
    def rounds(self) -> int:
        return len(self.test_sets)

    def test(self, r: int) -> frozenset[str]:
        return self.test_sets[r]

    def train(self, r: int) -> frozenset[str]:
        return frozenset(self.clip_ids) - self.test_sets[r]

    def validate(self) -> None:
        ids = set(self.clip_ids)
        seen: set[str] = set()
        for r, test in enumerate(self.test_sets):
            unknown = test - ids
            if unknown:
                raise SplitError(f"round {r + 1} tests unknown clips: {sorted(unknown)[:5]}")
            dup = test & seen
            if dup:
                raise SplitError(f"clips tested in more than one round: {sorted(dup)[:5]}")
            seen |= test
        if seen != ids:
            raise SplitError(f"{len(ids - seen)} clips are never tested")


@dataclass
class LeakageReport:
    # round index (1-based) -> source_id -> offending clip ids (train side + test side)
    rounds: dict[int, dict[str, list[str]]] = field(default_factory=dict)

    @property
    def leaked_sources(self) -> int:
        return len({s for per_round in self.rounds.values() for s in per_round})

    @property
    def flagged_pairs(self) -> int:
        return sum(len(v) for v in self.rounds.values())

    def is_clean(self) -> bool:
        return self.flagged_pairs == 0

    def to_json(self) -> str:
        payload = {
            "leaked_sources": self.leaked_sources,
            "rounds": {str(r): srcs for r, srcs in sorted(self.rounds.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{self.leaked_sources} leaked sources"]
        for r, srcs in sorted(self.rounds.items()):
            if not srcs:
                continue
            lines.append(f"round {r}: {len(srcs)} sources span train and test")
            for src, clips in sorted(srcs.items()):
                lines.append(f"  {src}: {', '.join(clips)}")
        return "\n".join(lines)


def parse_manifest(path, fold_count: int | None = None) -> list[ManifestEntry]:
    """Read a comma-separated manifest with header ``clip_path,class_label,fold_id,source_id,snippet_index``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in MANIFEST_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        entries = []
        seen: dict[tuple[str, int], int] = {}
        paths: set[str] = set()
        for line, row in enumerate(reader, start=2):
            try:
                entry = ManifestEntry(
                    clip_path=row["clip_path"],
                    class_label=int(row["class_label"]),
                    fold_id=int(row["fold_id"]),
                    source_id=row["source_id"],
                    snippet_index=int(row["snippet_index"]),
                )
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{line}: {exc}") from None
            if entry.class_label < 0:
                raise SchemaError(f"{path}:{line}: negative class_label {entry.class_label}")
            if entry.fold_id < 1 or (fold_count is not None and entry.fold_id > fold_count):
                bound = f"1..{fold_count}" if fold_count is not None else ">= 1"
                raise FoldRangeError(f"{path}:{line}: fold_id {entry.fold_id} outside {bound}")
            key = (entry.source_id, entry.snippet_index)
            if key in seen:
                raise IntegrityError(f"{path}:{line}: snippet {key} already defined on line {seen[key]}")
            if entry.clip_path in paths:
                raise IntegrityError(f"{path}:{line}: clip {entry.clip_path!r} listed twice")
            seen[key] = line
            paths.add(entry.clip_path)
            entries.append(entry)
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            w.writerow([e.clip_path, e.class_label, e.fold_id, e.source_id, e.snippet_index])


def official_folds(entries: Sequence[ManifestEntry], k: int | None = None) -> SplitAssignment:
    """Round ``i`` tests exactly the clips whose ``fold_id`` is ``i``."""
    if k is None:
        k = max(e.fold_id for e in entries)
    by_fold: dict[int, set[str]] = defaultdict(set)
    for e in entries:
        if not 1 <= e.fold_id <= k:
            raise FoldRangeError(f"{e.clip_path}: fold_id {e.fold_id} outside 1..{k}")
        by_fold[e.fold_id].add(e.clip_path)
    empty = [f for f in range(1, k + 1) if not by_fold[f]]
    if empty:
        raise SplitError(f"fold {empty[0]} has no clips")
    return SplitAssignment(tuple(e.clip_path for e in entries), [frozenset(by_fold[f]) for f in range(1, k + 1)])


def stratified_kfold(entries: Sequence[ManifestEntry], k: int, seed: int) -> SplitAssignment:
    """Per-clip stratified split that ignores ``source_id`` (the unofficial protocol).

    Each class is shuffled with a seeded Fisher-Yates pass, then dealt
    round-robin starting from round 1, so per-class test counts differ by at
    most one and earlier rounds receive the extra clips.
    """
    if k < 2:
        raise SplitError(f"k must be at least 2, got {k}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = defaultdict(list)
    for e in entries:
        by_class[e.class_label].append(e.clip_path)
    tests: list[set[str]] = [set() for _ in range(k)]
    for label in sorted(by_class):
        clips = by_class[label]
        if len(clips) < k:
            warnings.warn(f"class {label} has {len(clips)} clips, fewer than k={k}; it is tested in only "
                          f"{len(clips)} rounds", stacklevel=2)
        order = list(clips)
        for i in range(len(order) - 1, 0, -1):
            j = int(rng.integers(0, i + 1))
            order[i], order[j] = order[j], order[i]
        for n, clip in enumerate(order):
            tests[n % k].add(clip)
    return SplitAssignment(tuple(e.clip_path for e in entries), [frozenset(t) for t in tests])


def audit_split(entries: Sequence[ManifestEntry], assignment: SplitAssignment) -> LeakageReport:
    """Flag, per round, every source with at least one clip in train and one in test."""
    source_of = {e.clip_path: e.source_id for e in entries}
    for test in assignment.test_sets:
        unknown = test - source_of.keys()
        if unknown:
            raise SplitError(f"assignment references unknown clips: {sorted(unknown)[:5]}")
    report = LeakageReport()
    for r, test in enumerate(assignment.test_sets, start=1):
        sides: dict[str, tuple[list[str], list[str]]] = defaultdict(lambda: ([], []))
        for e in entries:
            sides[e.source_id][e.clip_path in test].append(e.clip_path)
        report.rounds[r] = {src: sorted(train) + sorted(test_clips)
                            for src, (train, test_clips) in sides.items() if train and test_clips}
    return report


@dataclass
class SynthDataset:
    entries: list[ManifestEntry]
    audio: dict[str, np.ndarray]  # clip_path -> mono samples
    sources: dict[str, np.ndarray]
    sample_rate: int
    snippet_samples: int


def _class_frequencies(num_classes: int) -> np.ndarray:
    # log-spaced class centres between 300 Hz and 6 kHz
    return np.geomspace(300.0, 6000.0, num_classes)


def synth_overlapped_manifest(num_sources: int, snippets_per_source: int, num_classes: int, seed: int,
                              snippet_seconds: float = 1.0, sample_rate: int = 44100, folds: int | None = None,
                              class_weight: float = 1.0, noise: float = 0.05) -> SynthDataset:
    """Synthetic recordings cut into 50 %-overlapping snippets.

    Each source is a class tone (at a class-specific frequency, jittered per
    source) mixed with two source-specific tones and white noise. Snippet
    ``j`` covers ``[j * L/2, j * L/2 + L)`` of its source. Sources are dealt
    to ``folds`` grouped folds (default: up to 10), so every snippet of a
    source shares its ``fold_id``; sources are assigned round-robin within
    each class to keep folds class-balanced.

    ``class_weight`` scales the class tone relative to the source tones;
    lowering it makes the class harder to infer from unseen sources.
    """
    if num_sources < 1 or snippets_per_source < 1 or num_classes < 1:
        raise ValueError("num_sources, snippets_per_source and num_classes must all be positive")
    if folds is None:
        folds = min(10, num_sources)
    rng = np.random.default_rng(seed)
    L = int(round(snippet_seconds * sample_rate))
    hop = L // 2
    total = hop * (snippets_per_source - 1) + L
    t = np.arange(total) / sample_rate
    centres = _class_frequencies(num_classes)
    entries: list[ManifestEntry] = []
    audio: dict[str, np.ndarray] = {}
    sources: dict[str, np.ndarray] = {}
    per_class_count: dict[int, int] = defaultdict(int)
    for s in range(num_sources):
        label = s % num_classes
        fold = per_class_count[label] % folds + 1
        per_class_count[label] += 1
        f_class = centres[label] * rng.uniform(0.97, 1.03)
        f_src = rng.uniform(200.0, 8000.0, size=2)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        amps = rng.uniform(0.5, 1.0, size=2)
        wave = class_weight * np.sin(2 * np.pi * f_class * t + phases[0])
        for f, a, ph in zip(f_src, amps, phases[1:]):
            wave += a * np.sin(2 * np.pi * f * t + ph)
        wave += noise * rng.standard_normal(total)
        wave *= 0.25 / max(1e-9, np.max(np.abs(wave)))
        source_id = f"src{s:04d}"
        sources[source_id] = wave
        for j in range(snippets_per_source):
            path = f"{source_id}_{j}.wav"
            audio[path] = wave[j * hop:j * hop + L]
            entries.append(ManifestEntry(path, label, fold, source_id, j))
    return SynthDataset(entries, audio, sources, sample_rate, L)
