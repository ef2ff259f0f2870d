"""ESResNet / ESResNet-Attention on 3-band spectrograms, Siamese stereo fusion, weight files.

The backbone is ResNet-50 (v1.5 strides: the 3x3 conv of each bottleneck
carries the stage stride). Parameter names follow the torchvision layout so
externally trained ImageNet weights can be imported by name.

Attention branch ``att{i}`` runs in parallel with residual stage ``layer{i}``
on the same input: max-pool (3x3, stage stride) -> depthwise-separable conv
-> BN -> sigmoid. Stages alternate between frequency kernels (7x1, odd
stages) and time kernels (1x7, even stages). The last block gates the pooled
embedding: max-pool -> 1x1 depthwise-separable conv -> BN on the final feature
map, global average pool, sigmoid.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import functional as F
from .nn.tensor import ShapeError, Tensor, default_dtype

BASE_WIDTHS = (64, 128, 256, 512)
RESNET50_LAYERS = (3, 4, 6, 3)
EXPANSION = 4
HEAD_NAMES = ("fc.weight", "fc.bias")

WEIGHT_MAGIC = b"ESRW"
WEIGHT_VERSION = 1


class ConfigError(ValueError):
    pass


class WeightFormatError(ValueError):
    pass


class WeightLoadError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass
class ModelConfig:
    num_classes: int
    attention: bool = False
    width_scale: float = 1.0
    input_channels: int = 3
    freq_bins: int = 341
    layers: tuple[int, ...] = RESNET50_LAYERS
    # spectrogram dB values are divided by this before the stem
    input_scale: float = 100.0
    attention_kernel: int = 7

    def __post_init__(self):
        self.layers = tuple(int(n) for n in self.layers)
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if not 1 <= len(self.layers) <= 4 or min(self.layers) < 1:
            raise ConfigError(f"layers must hold 1-4 positive block counts, got {self.layers}")
        if not self.width_scale > 0:
            raise ConfigError(f"width_scale must be positive, got {self.width_scale}")
        if min(self.widths) < 1:
            raise ConfigError(f"width_scale {self.width_scale} rounds a stage width to zero")
        if self.input_scale <= 0:
            raise ConfigError("input_scale must be positive")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(int(round(w * self.width_scale)) for w in BASE_WIDTHS)

    @property
    def embedding_size(self) -> int:
        return self.widths[len(self.layers) - 1] * EXPANSION


class Bottleneck(nn.Module):
    def __init__(self, inplanes: int, planes: int, stride: int, *, rng):
        super().__init__()
        out = planes * EXPANSION
        self.conv1 = nn.Conv2d(inplanes, planes, 1, rng=rng)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, rng=rng)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out, 1, rng=rng)
        self.bn3 = nn.BatchNorm2d(out)
        if stride != 1 or inplanes != out:
            self.downsample = nn.Sequential(nn.Conv2d(inplanes, out, 1, stride=stride, rng=rng), nn.BatchNorm2d(out))
        else:
            self.downsample = None

    def residual(self, x: Tensor) -> Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        return self.bn3(self.conv3(h))

    def forward(self, x: Tensor) -> Tensor:
        shortcut = x if self.downsample is None else self.downsample(x)
        return F.relu(self.residual(x) + shortcut)


class AttentionBlock(nn.Module):
    """Sigmoid gate shaped like the paired stage output (or the pooled embedding for ``joint``)."""

    def __init__(self, in_channels: int, out_channels: int, axis: str, stride: int, kernel: int = 7, *, rng):
        super().__init__()
        if axis == "frequency":
            ksize, pad = (kernel, 1), (kernel // 2, 0)
        elif axis == "time":
            ksize, pad = (1, kernel), (0, kernel // 2)
        elif axis == "joint":
            ksize, pad = (1, 1), (0, 0)
        else:
            raise ConfigError(f"unknown attention axis {axis!r}")
        self.axis = axis
        self.pool = nn.MaxPool2d(3, stride, 1)
        self.conv = nn.DepthwiseSeparableConv2d(in_channels, out_channels, ksize, padding=pad, rng=rng)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        h = self.bn(self.conv(self.pool(x)))
        if self.axis == "joint":
            h = F.flatten(F.global_avg_pool2d(h))
        return F.sigmoid(h)


class ESResNet(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        widths = config.widths
        stem = widths[0]
        self.conv1 = nn.Conv2d(config.input_channels, stem, 7, stride=2, padding=3, rng=rng)
        self.bn1 = nn.BatchNorm2d(stem)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.stages: list[nn.Sequential] = []
        inplanes = stem
        for i, depth in enumerate(config.layers):
            stride = 1 if i == 0 else 2
            planes = widths[i]
            blocks = [Bottleneck(inplanes, planes, stride, rng=rng)]
            inplanes = planes * EXPANSION
            blocks += [Bottleneck(inplanes, planes, 1, rng=rng) for _ in range(depth - 1)]
            layer = nn.Sequential(*blocks)
            setattr(self, f"layer{i + 1}", layer)
            self.stages.append(layer)
        self.fc = nn.Linear(inplanes, config.num_classes, rng=rng)

        self.attentions: list[AttentionBlock] = []
        if config.attention:
            att_rng = np.random.default_rng([seed, 1])
            cin = stem
            for i in range(len(config.layers)):
                axis = "frequency" if i % 2 == 0 else "time"
                cout = widths[i] * EXPANSION
                block = AttentionBlock(cin, cout, axis, 1 if i == 0 else 2, config.attention_kernel, rng=att_rng)
                setattr(self, f"att{i + 1}", block)
                self.attentions.append(block)
                cin = cout
            joint = AttentionBlock(cin, cin, "joint", 1, rng=att_rng)
            setattr(self, f"att{len(config.layers) + 1}", joint)
            self.attentions.append(joint)

    @property
    def att_joint(self) -> AttentionBlock:
        return self.attentions[-1]

    def _check_input(self, x: Tensor) -> None:
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.input_channels or x.shape[2] != c.freq_bins:
            raise ShapeError(
                f"expected N x {c.input_channels} x {c.freq_bins} x T spectrogram batch, got {x.shape}")

    def stem(self, x: Tensor) -> Tensor:
        self._check_input(x)
        x = F.scale(x, 1.0 / self.config.input_scale)
        return self.maxpool(F.relu(self.bn1(self.conv1(x))))

    def embed(self, x: Tensor, mask_override: float | None = None) -> Tensor:
        """Pooled backbone embedding, N x embedding_size.

        ``mask_override`` replaces every attention mask by a constant (test hook).
        """
        h = self.stem(x)
        for i, layer in enumerate(self.stages):
            out = layer(h)
            if self.attentions:
                out = self._gate(out, self.attentions[i], h, mask_override)
            h = out
        e = F.flatten(F.global_avg_pool2d(h))
        if self.attentions:
            e = self._gate(e, self.att_joint, h, mask_override)
        return e

    @staticmethod
    def _gate(out: Tensor, block: AttentionBlock, block_input: Tensor, mask_override) -> Tensor:
        if mask_override is None:
            mask = block(block_input)
        else:
            mask = Tensor(np.full(out.shape, mask_override, dtype=out.dtype))
        if mask.shape != out.shape:
            raise ConfigError(f"attention mask {mask.shape} does not match layer output {out.shape}")
        return fuse_attention(out, mask)

    def head(self, embedding: Tensor) -> Tensor:
        return self.fc(embedding)

    def forward(self, x: Tensor, mask_override: float | None = None) -> Tensor:
        return self.head(self.embed(x, mask_override))

    def forward_clips(self, clips: list[np.ndarray]) -> Tensor:
        """Logits for a batch of clips, each an array of shape channels x 3 x F x T.

        All channel images go through the backbone in one batch; embeddings of
        the channels of one clip are summed (Siamese fusion) before the head.
        """
        images = np.concatenate([np.asarray(c) for c in clips], axis=0)
        counts = [len(c) for c in clips]
        e = self.embed(Tensor(images.astype(default_dtype(), copy=False)))
        if all(n == 1 for n in counts):
            return self.head(e)
        fuse = np.zeros((len(clips), len(images)), dtype=e.dtype)
        start = 0
        for row, n in enumerate(counts):
            fuse[row, start:start + n] = 1
            start += n
        return self.head(F.matmul(Tensor(fuse), e))


def fuse_attention(layer_out: Tensor, att_out: Tensor) -> Tensor:
    """Gate a layer output by its attention mask, elementwise."""
    return F.mul(layer_out, att_out)


def build(config: ModelConfig, seed: int = 0) -> ESResNet:
    return ESResNet(config, seed)


def _as_batch(spec) -> Tensor:
    arr = spec.data if isinstance(spec, Tensor) else np.asarray(spec)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr.astype(default_dtype(), copy=False))


def forward_mono(spec, model: ESResNet, mask_override: float | None = None) -> Tensor:
    """Logits of shape 1 x num_classes for one 3 x F x T spectrogram (or a batch)."""
    return model(_as_batch(spec), mask_override)


def stereo_embedding(left, right, model: ESResNet) -> Tensor:
    lb, rb = _as_batch(left), _as_batch(right)
    if lb.shape != rb.shape:
        raise ShapeError(f"stereo channels differ in shape: {lb.shape} vs {rb.shape}")
    return model.embed(lb) + model.embed(rb)


def forward_stereo(left, right, model: ESResNet) -> Tensor:
    """Shared-weight backbone on each channel, embeddings added, then the head."""
    return model.head(stereo_embedding(left, right, model))


def parameter_count(config: ModelConfig) -> int:
    """Trainable parameters from per-layer formulas, without building the model."""
    w = config.widths
    conv = lambda cin, cout, kh, kw=None: cin * cout * kh * (kw or kh)  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731
    total = conv(config.input_channels, w[0], 7) + bn(w[0])
    inplanes = w[0]
    for i, depth in enumerate(config.layers):
        planes = w[i]
        out = planes * EXPANSION
        for b in range(depth):
            cin = inplanes if b == 0 else out
            total += conv(cin, planes, 1) + bn(planes)
            total += conv(planes, planes, 3) + bn(planes)
            total += conv(planes, out, 1) + bn(out)
            if b == 0 and (i > 0 or cin != out):
                total += conv(cin, out, 1) + bn(out)
        inplanes = out
    total += inplanes * config.num_classes + config.num_classes
    if config.attention:
        k = config.attention_kernel
        cin = w[0]
        for i in range(len(config.layers)):
            cout = w[i] * EXPANSION
            total += cin * k + cin * cout + bn(cout)
            cin = cout
        total += cin + cin * cin + bn(cin)
    return total


# -- weight files ------------------------------------------------------------

def save_weights(store, path) -> None:
    """Write an ordered name -> array mapping in the ESRW format (float32, little-endian)."""
    if isinstance(store, nn.Module):
        store = store.state_dict()
    chunks = [WEIGHT_MAGIC, struct.pack("<HI", WEIGHT_VERSION, len(store))]
    for name, arr in store.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weight_file(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: bad magic {data[:4]!r}, expected {WEIGHT_MAGIC!r}")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        if version != WEIGHT_VERSION:
            raise WeightFormatError(f"{path}: unsupported weight format version {version}")
        pos = 10
        store: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            if name in store:
                raise WeightFormatError(f"{path}: duplicate tensor {name!r}")
            (rank,) = struct.unpack_from("<B", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise WeightFormatError(f"{path}: tensor {name!r} truncated")
            store[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise WeightFormatError(f"{path}: truncated header ({exc})") from None
    if pos != len(data):
        raise WeightFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return store


def load_weights(path, config: ModelConfig, seed: int = 0) -> "OrderedDict[str, np.ndarray]":
    """Read a weight file and validate it against ``config``.

    The classifier head may be absent or sized for another class count; it is
    then replaced by a freshly initialised head. Any other missing tensor or
    shape mismatch raises :class:`WeightLoadError`.
    """
    stored = read_weight_file(path)
    reference = build(config, seed).state_dict()
    missing = [k for k in reference if k not in stored and k not in HEAD_NAMES]
    if missing:
        raise WeightLoadError(f"missing tensors: {', '.join(missing)}")
    head_ok = all(k in stored and stored[k].shape == reference[k].shape for k in HEAD_NAMES)
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, ref in reference.items():
        if name in HEAD_NAMES and not head_ok:
            out[name] = ref.copy()
            continue
        if stored[name].shape != ref.shape:
            raise WeightLoadError(f"shape mismatch for {name}: file has {stored[name].shape}, config expects {ref.shape}")
        out[name] = stored[name]
    return out


def load_model(path, config: ModelConfig, seed: int = 0) -> ESResNet:
    model = build(config, seed)
    model.load_state_dict(load_weights(path, config, seed))
    return model
