"""Command-line entry point: ``escnet {synth,extract,train,eval,crossval,audit}``.

Exit codes: 0 success, 1 leakage detected (audit), 2 usage or input error,
3 data or weight integrity error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import audio_io, dsp, folds, training
from .esresnet import ConfigError, ModelConfig, WeightFormatError, WeightLoadError, build, load_model, save_weights

log = logging.getLogger("escnet")

EXIT_OK, EXIT_LEAK, EXIT_USAGE, EXIT_INTEGRITY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class IntegrityFailure(Exception):
    pass


# -- argument groups ---------------------------------------------------------

def _front_end_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("front-end")
    g.add_argument("--sample-rate", type=int, default=44100)
    g.add_argument("--frame-ms", type=float, default=37.5)
    g.add_argument("--overlap", type=float, default=0.661)
    g.add_argument("--fft", type=int, default=2048)
    g.add_argument("--bands", type=int, default=3)
    g.add_argument("--epsilon-power", type=float, default=1e-12)
    g.add_argument("--clip-seconds", type=float, default=None,
                   help="fit every clip to this duration (default: longest clip in the set)")
    g.add_argument("--stereo", action="store_true", help="keep both channels (Siamese fusion) instead of downmixing")


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--attention", action="store_true")
    g.add_argument("--width-scale", type=float, default=1.0)
    g.add_argument("--layers", type=str, default="3,4,6,3", help="bottleneck blocks per stage")
    g.add_argument("--num-classes", type=int, default=None, help="default: largest class label + 1")
    g.add_argument("--model-seed", type=int, default=0)


def _train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=300)
    g.add_argument("--batch", type=int, default=16)
    g.add_argument("--lr", type=float, default=2.5e-4)
    g.add_argument("--gamma", type=float, default=0.985)
    g.add_argument("--wd", type=float, default=5e-4)
    g.add_argument("--no-augment", action="store_true")


def _split_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("split")
    g.add_argument("--split", choices=("official", "stratified"), default="official")
    g.add_argument("--k", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="escnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate an overlapped-snippet WAV dataset and manifest")
    p.add_argument("out", type=Path)
    p.add_argument("--sources", type=int, default=40)
    p.add_argument("--snippets", type=int, default=4)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seconds", type=float, default=1.0)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--class-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("extract", help="write spectrogram cache files for WAV input")
    p.add_argument("input", type=Path)
    p.add_argument("out", type=Path)
    _front_end_args(p)

    p = sub.add_parser("train", help="train on one round of a split and write weights + metrics")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True, help="weight file to write")
    p.add_argument("--metrics", type=Path, default=None, help="metrics log (default: <out>.metrics.tsv)")
    p.add_argument("--test-round", type=int, default=1, help="1-based round held out; 0 trains on every clip")
    _split_args(p)
    _front_end_args(p)
    _model_args(p)
    _train_args(p)

    p = sub.add_parser("eval", help="accuracy of a weight file on every round's test set")
    p.add_argument("manifest", type=Path)
    p.add_argument("weights", type=Path)
    _split_args(p)
    _front_end_args(p)
    _model_args(p)

    p = sub.add_parser("crossval", help="train a fresh model per round and report held-out accuracy")
    p.add_argument("manifest", type=Path)
    _split_args(p)
    _front_end_args(p)
    _model_args(p)
    _train_args(p)

    p = sub.add_parser("audit", help="report sources whose snippets span train and test")
    p.add_argument("manifest", type=Path)
    p.add_argument("--json", type=Path, default=None, help="also write the report as JSON")
    _split_args(p)
    return parser


# -- helpers -----------------------------------------------------------------

def _front_end(args) -> dsp.FrontEndConfig:
    try:
        return dsp.FrontEndConfig(sample_rate=args.sample_rate, frame_ms=args.frame_ms, overlap=args.overlap,
                                  fft_size=args.fft, bands=args.bands, epsilon_power=args.epsilon_power)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _manifest(args) -> list[folds.ManifestEntry]:
    if not args.manifest.is_file():
        raise UsageError(f"manifest not found: {args.manifest}")
    try:
        entries = folds.parse_manifest(args.manifest)
    except folds.ManifestError as exc:
        raise UsageError(str(exc)) from None
    if not entries:
        raise UsageError(f"manifest {args.manifest} has no rows")
    return entries


def _split(args, entries) -> folds.SplitAssignment:
    try:
        if args.split == "official":
            return folds.official_folds(entries)
        return folds.stratified_kfold(entries, args.k, args.seed)
    except folds.SplitError as exc:
        raise UsageError(str(exc)) from None


def _model_config(args, entries) -> ModelConfig:
    try:
        layers = tuple(int(v) for v in args.layers.split(","))
        num_classes = args.num_classes or max(e.class_label for e in entries) + 1
        return ModelConfig(num_classes=num_classes, attention=args.attention, width_scale=args.width_scale,
                           layers=layers, freq_bins=_front_end(args).band_height)
    except (ValueError, ConfigError) as exc:
        raise UsageError(str(exc)) from None


def _load_clips(args, entries, fe: dsp.FrontEndConfig) -> dict[str, training.LabeledClip]:
    root = args.manifest.parent
    audio: dict[str, np.ndarray] = {}
    for e in entries:
        try:
            clip = audio_io.resample(audio_io.read_wav(root / e.clip_path), fe.sample_rate)
        except (OSError, audio_io.WavDecodeError) as exc:
            raise IntegrityFailure(f"{e.clip_path}: {exc}") from None
        if not args.stereo:
            clip = audio_io.to_mono(clip)
        audio[e.clip_path] = clip.samples
    if args.clip_seconds is not None:
        target = int(round(args.clip_seconds * fe.sample_rate))
    else:
        target = max(a.shape[1] for a in audio.values())
    if target < fe.frame_len:
        raise UsageError(f"clips of {target} samples are shorter than one frame")
    return {e.clip_path: training.LabeledClip(audio_io.fit_samples(audio[e.clip_path], target), e.class_label,
                                              e.clip_path) for e in entries}


def _train_config(args) -> training.TrainConfig:
    try:
        return training.TrainConfig(epochs=args.epochs, batch_size=args.batch, base_lr=args.lr, gamma=args.gamma,
                                    weight_decay=args.wd, seed=args.seed, augment=not args.no_augment)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _print_result(result: training.EvalResult) -> None:
    for r, (acc, n) in enumerate(zip(result.per_fold, result.counts), start=1):
        print(f"fold {r}\t{100 * acc:.1f} %\t({n} clips)")
    print(f"mean\t{100 * result.mean:.1f} %")


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.sources < 1 or args.snippets < 1 or args.classes < 1:
        raise UsageError("--sources, --snippets and --classes must be positive")
    data = folds.synth_overlapped_manifest(args.sources, args.snippets, args.classes, args.seed,
                                           snippet_seconds=args.seconds, folds=args.folds,
                                           class_weight=args.class_weight)
    args.out.mkdir(parents=True, exist_ok=True)
    for path, samples in data.audio.items():
        audio_io.write_wav(args.out / path, audio_io.AudioClip(samples, data.sample_rate))
    folds.write_manifest(args.out / "manifest.csv", data.entries)
    print(f"wrote {len(data.entries)} clips from {args.sources} sources to {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    fe = _front_end(args)
    if args.input.is_dir():
        files = sorted(p for p in args.input.iterdir() if p.suffix.lower() == ".wav")
    elif args.input.is_file():
        files = [args.input]
    else:
        raise UsageError(f"input not found: {args.input}")
    if not files:
        log.warning("no WAV files in %s", args.input)
        return EXIT_OK
    args.out.mkdir(parents=True, exist_ok=True)
    target = int(round(args.clip_seconds * fe.sample_rate)) if args.clip_seconds else None
    written = failed = 0
    for path in files:
        try:
            clip = audio_io.resample(audio_io.read_wav(path), fe.sample_rate)
            if not args.stereo:
                clip = audio_io.to_mono(clip)
            if target is not None:
                clip = audio_io.fit_length(clip, target)
            specs = dsp.extract_features(clip, fe)
        except (OSError, ValueError) as exc:
            log.error("%s: %s", path, exc)
            failed += 1
            continue
        for i, spec in enumerate(specs):
            name = f"{path.stem}.esrs" if len(specs) == 1 else f"{path.stem}.ch{i}.esrs"
            dsp.save_spectrogram(args.out / name, spec)
            written += 1
    print(f"wrote {written} spectrograms, {failed} files failed")
    return EXIT_INTEGRITY if failed == len(files) else EXIT_OK


def cmd_train(args) -> int:
    entries = _manifest(args)
    fe = _front_end(args)
    assignment = _split(args, entries)
    model_cfg = _model_config(args, entries)
    cfg = _train_config(args)
    clips = _load_clips(args, entries, fe)
    if args.test_round == 0:
        ids = sorted(clips)
    elif 1 <= args.test_round <= assignment.rounds:
        ids = sorted(assignment.train(args.test_round - 1))
    else:
        raise UsageError(f"--test-round must lie in 0..{assignment.rounds}")
    model = build(model_cfg, args.model_seed)
    metrics_path = args.metrics or args.out.with_name(args.out.name + ".metrics.tsv")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(metrics_path, "w") as fh:
        result = training.train(model, [clips[i] for i in ids], cfg, fe,
                                on_epoch=lambda m: (fh.write(m.line() + "\n"), fh.flush()))
    save_weights(result.weights, args.out)
    last = result.history[-1]
    print(f"trained {cfg.epochs} epochs on {len(ids)} clips: loss {last.train_loss:.4f}, "
          f"accuracy {100 * last.train_acc:.1f} %")
    return EXIT_OK


def cmd_eval(args) -> int:
    entries = _manifest(args)
    fe = _front_end(args)
    assignment = _split(args, entries)
    model_cfg = _model_config(args, entries)
    if not args.weights.is_file():
        raise UsageError(f"weight file not found: {args.weights}")
    try:
        model = load_model(args.weights, model_cfg, args.model_seed)
    except (WeightFormatError, WeightLoadError) as exc:
        raise IntegrityFailure(str(exc)) from None
    clips = _load_clips(args, entries, fe)
    _print_result(training.evaluate(model, clips, assignment, fe))
    return EXIT_OK


def cmd_crossval(args) -> int:
    entries = _manifest(args)
    fe = _front_end(args)
    assignment = _split(args, entries)
    model_cfg = _model_config(args, entries)
    cfg = _train_config(args)
    clips = _load_clips(args, entries, fe)
    _print_result(training.cross_validate(clips, assignment, model_cfg, cfg, fe, args.model_seed))
    return EXIT_OK


def cmd_audit(args) -> int:
    entries = _manifest(args)
    report = folds.audit_split(entries, _split(args, entries))
    print(report.to_text())
    if args.json is not None:
        args.json.write_text(report.to_json() + "\n")
    return EXIT_OK if report.is_clean() else EXIT_LEAK


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "train": cmd_train, "eval": cmd_eval,
            "crossval": cmd_crossval, "audit": cmd_audit}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"escnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityFailure as exc:
        print(f"escnet {args.command}: integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
