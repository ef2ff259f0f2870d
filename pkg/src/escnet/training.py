"""Training loop: Adam with coupled L2, warm-up + exponential decay, waveform augmentation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import dsp
from .audio_io import fit_samples, sinc_resample
from .esresnet import ESResNet, ModelConfig, build
from .folds import SplitAssignment
from .nn import functional as F
from .nn.tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    base_lr: float = 2.5e-4
    warmup_low_epochs: int = 5
    warmup_ramp_epochs: int = 10
    gamma: float = 0.985
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    inversion_prob: float = 0.5
    scale_range: tuple[float, float] = (1 / 1.25, 1.25)
    augment: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale_range {self.scale_range}")


@dataclass
class LabeledClip:
    samples: np.ndarray  # channels x length at the front-end rate
    label: int
    clip_id: str = ""

    def __post_init__(self):
        s = np.asarray(self.samples)
        self.samples = s[None] if s.ndim == 1 else s


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float | None = None

    def line(self) -> str:
        fields = [str(self.epoch), repr(self.lr), f"{self.train_loss:.6f}", f"{self.train_acc:.6f}"]
        if self.val_acc is not None:
            fields.append(f"{self.val_acc:.6f}")
        return "\t".join(fields)


@dataclass
class TrainResult:
    weights: dict
    history: list[EpochMetrics] = field(default_factory=list)


# -- schedule and optimiser --------------------------------------------------

def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Learning rate for ``epoch`` (0-based).

    ``warmup_low_epochs`` at base/10, then a linear ramp reaching ``base_lr``
    after ``warmup_ramp_epochs`` more epochs, then ``base_lr * gamma**k`` where
    ``k`` counts epochs past the peak.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    low = cfg.warmup_low_epochs
    peak = low + cfg.warmup_ramp_epochs - 1
    if epoch < low:
        return cfg.base_lr / 10
    if epoch < peak:
        return cfg.base_lr * (0.1 + 0.9 * (epoch - low + 1) / cfg.warmup_ramp_epochs)
    return cfg.base_lr * cfg.gamma ** (epoch - peak)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def decays(name: str, param: Tensor) -> bool:
    """Weight decay applies to conv / linear kernels, not to biases or BN affine terms."""
    return param.ndim >= 2


def adam_step(params: Sequence[tuple[str, Tensor]], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One in-place Adam update with L2 decay added to the gradient."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.sum(~np.isfinite(p.grad)))
            raise FloatingPointError(f"non-finite gradient in {name} ({bad} of {p.grad.size} entries)")
        g = p.grad
        if cfg.weight_decay and decays(name, p):
            g = g + p.data.dtype.type(cfg.weight_decay) * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= (lr * step).astype(p.dtype, copy=False)


# -- augmentation ------------------------------------------------------------

def augment_time_inversion(samples: np.ndarray, rng: np.random.Generator | None = None, p: float = 0.5,
                           force: bool | None = None) -> np.ndarray:
    """Reverse along time with probability ``p`` (or always / never when ``force`` is set)."""
    invert = force if force is not None else bool(rng.random() < p)
    return samples[..., ::-1].copy() if invert else samples


def augment_time_scale(samples: np.ndarray, rng: np.random.Generator | None = None,
                       scale_range: tuple[float, float] = (0.8, 1.25), factor: float | None = None) -> np.ndarray:
    """Stretch by ``s ~ U(scale_range)`` (length times ``s``, pitch divided by ``s``), then refit the length."""
    s = factor if factor is not None else float(rng.uniform(*scale_range))
    n = samples.shape[-1]
    if s == 1.0:
        return samples.copy()
    return fit_samples(sinc_resample(samples, s), n)


# -- data plumbing -----------------------------------------------------------

def clip_features(samples: np.ndarray, front_end: dsp.FrontEndConfig) -> np.ndarray:
    """channels x bands x bins x frames float32 array."""
    return np.stack([dsp.spectrogram(ch, front_end) for ch in samples])


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def predict(model: ESResNet, clips: Sequence[LabeledClip], front_end: dsp.FrontEndConfig = dsp.FrontEndConfig(),
            batch_size: int = 16, features: Mapping[int, np.ndarray] | None = None) -> np.ndarray:
    """Eval-mode class predictions (no augmentation)."""
    model.eval()
    preds = []
    with no_grad():
        for idx in _batches(np.arange(len(clips)), batch_size):
            feats = [features[i] if features is not None else clip_features(clips[i].samples, front_end)
                     for i in idx]
            preds.append(np.argmax(model.forward_clips(feats).data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: ESResNet, clips: Sequence[LabeledClip], front_end: dsp.FrontEndConfig = dsp.FrontEndConfig(),
             batch_size: int = 16) -> float:
    if not clips:
        raise ValueError("accuracy of an empty set is undefined")
    labels = np.array([c.label for c in clips])
    return float(np.mean(predict(model, clips, front_end, batch_size) == labels))


def train(model: ESResNet, clips: Sequence[LabeledClip], cfg: TrainConfig = TrainConfig(),
          front_end: dsp.FrontEndConfig = dsp.FrontEndConfig(), val_clips: Sequence[LabeledClip] | None = None,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> TrainResult:
    """Optimise ``model`` in place and return its final weights with per-epoch metrics.

    One generator seeded by ``cfg.seed`` drives, per epoch, the shuffle and
    then per clip the inversion draw followed by the scale draw. The last
    incomplete batch is kept.
    """
    if not clips:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    params = list(model.named_parameters())
    state = AdamState()
    labels = np.array([c.label for c in clips])
    cached = None if cfg.augment else {i: clip_features(c.samples, front_end) for i, c in enumerate(clips)}
    history: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        model.train()
        order = rng.permutation(len(clips))
        loss_sum = 0.0
        correct = 0
        for idx in _batches(order, cfg.batch_size):
            feats = []
            for i in idx:
                if cached is not None:
                    feats.append(cached[i])
                    continue
                x = augment_time_inversion(clips[i].samples, rng, cfg.inversion_prob)
                x = augment_time_scale(x, rng, cfg.scale_range)
                feats.append(clip_features(x, front_end))
            logits = model.forward_clips(feats)
            loss = F.softmax_cross_entropy(logits, labels[idx])
            model.zero_grad()
            loss.backward()
            adam_step(params, state, lr, cfg)
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        metrics = EpochMetrics(epoch, lr, loss_sum / len(clips), correct / len(clips))
        if val_clips:
            metrics.val_acc = accuracy(model, val_clips, front_end, cfg.batch_size)
        history.append(metrics)
        log.info(metrics.line())
        if on_epoch is not None:
            on_epoch(metrics)
    model.eval()
    return TrainResult({k: v.copy() for k, v in model.state_dict().items()}, history)


@dataclass
class EvalResult:
    per_fold: list[float]
    counts: list[int]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_fold))

    @property
    def weighted_mean(self) -> float:
        return float(np.average(self.per_fold, weights=self.counts))


def evaluate(model: ESResNet, clips: Mapping[str, LabeledClip], assignment: SplitAssignment,
             front_end: dsp.FrontEndConfig = dsp.FrontEndConfig(), batch_size: int = 16) -> EvalResult:
    """Accuracy of one model on every round's test set, plus their mean."""
    per_fold, counts = [], []
    for r in range(assignment.rounds):
        test = [clips[c] for c in sorted(assignment.test(r))]
        per_fold.append(accuracy(model, test, front_end, batch_size))
        counts.append(len(test))
    return EvalResult(per_fold, counts)


def cross_validate(clips: Mapping[str, LabeledClip], assignment: SplitAssignment, model_cfg: ModelConfig,
                   cfg: TrainConfig, front_end: dsp.FrontEndConfig = dsp.FrontEndConfig(), model_seed: int = 0,
                   on_round: Callable[[int, float], None] | None = None) -> EvalResult:
    """Train a fresh model per round on the complement of its test set; report test accuracies."""
    per_fold, counts = [], []
    for r in range(assignment.rounds):
        train_set = [clips[c] for c in sorted(assignment.train(r))]
        test_set = [clips[c] for c in sorted(assignment.test(r))]
        model = build(model_cfg, model_seed)
        train(model, train_set, cfg, front_end)
        acc = accuracy(model, test_set, front_end, cfg.batch_size)
        per_fold.append(acc)
        counts.append(len(test_set))
        log.info("round %d: accuracy %.4f on %d clips", r + 1, acc, len(test_set))
        if on_round is not None:
            on_round(r, acc)
    return EvalResult(per_fold, counts)


TONE_REGIONS: tuple[tuple[float, float] | None, ...] = ((1000.0, 5800.0), (9200.0, 11700.0), (100.0, 20000.0), None)


def tone_dataset(num_clips: int, num_classes: int = 4, seconds: float = 1.0, seed: int = 0,
                 sample_rate: int = 44100, regions: Sequence[tuple[float, float] | None] = TONE_REGIONS,
                 tone_spacing: float = 25.0, level: float = 0.1, background: float = 0.01) -> list[LabeledClip]:
    """Balanced synthetic tone clusters; clip ``i`` has class ``i % num_classes``.

    Class ``c`` is a sum of random-phase sinusoids at uniform random
    frequencies in ``regions[c]`` (one tone per ``tone_spacing`` Hz), scaled to
    RMS ``level``, over white background of std ``background``; a ``None``
    region is background only. The default regions put class 0 in the lowest
    band, class 1 in the middle band and class 2 across all three, and each
    stays within its bands under the +-25 % time-scale augmentation. Single
    pure tones per class are a much harder target for a network that ends in
    global pooling, since only their position in frequency separates them.
    """
    if num_classes > len(regions):
        raise ValueError(f"only {len(regions)} regions for {num_classes} classes")
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    clips = []
    for i in range(num_clips):
        label = i % num_classes
        x = background * rng.standard_normal(n)
        region = regions[label]
        if region is not None:
            lo, hi = region
            y = np.zeros(n)
            for f in rng.uniform(lo, hi, int((hi - lo) / tone_spacing)):
                y += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
            x += level * y / y.std()
        clips.append(LabeledClip(x, label, f"tone{i:03d}"))
    return clips
