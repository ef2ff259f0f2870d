"""WAV decoding, band-limited resampling, channel collapse and length fitting."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

TARGET_RATE = 44100
ESC_SAMPLES = 5 * TARGET_RATE
US8K_SAMPLES = 4 * TARGET_RATE

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavDecodeError(ValueError):
    pass


class UnsupportedFormatError(WavDecodeError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray  # channels x length
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[1] == 0 or s.shape[0] not in (1, 2):
            raise ValueError(f"AudioClip needs 1 or 2 channels of positive length, got shape {s.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = s
        self.sample_rate = int(self.sample_rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        yield cid, size, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes) -> AudioClip:
    """Decode a RIFF/WAVE byte string holding PCM16 or float32 audio with 1-2 channels."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavDecodeError("RIFF header: not a RIFF/WAVE file")
    fmt = None
    frames = None
    for cid, size, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavDecodeError(f"fmt chunk: {len(body)} bytes, need at least 16")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                # sub-format GUID starts with the real format tag
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise WavDecodeError(f"data chunk: declares {size} bytes, only {len(body)} present")
            frames = body
    if fmt is None:
        raise WavDecodeError("fmt chunk: missing")
    if frames is None:
        raise WavDecodeError("data chunk: missing")
    tag, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedFormatError(f"{channels} channels (only mono and stereo are supported)")
    if tag == _PCM and bits == 16:
        dtype, scale = "<i2", 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise UnsupportedFormatError(f"format tag {tag} with {bits} bits per sample")
    if rate <= 0:
        raise WavDecodeError(f"fmt chunk: sample rate {rate}")
    width = bits // 8 * channels
    if len(frames) % width:
        raise WavDecodeError(f"data chunk: {len(frames)} bytes is not a whole number of {width}-byte frames")
    n = len(frames) // width
    if n == 0:
        raise WavDecodeError("data chunk: no samples")
    raw = np.frombuffer(frames, dtype=dtype).reshape(n, channels).T
    return AudioClip(raw.astype(np.float64) * scale, rate)


def read_wav(path) -> AudioClip:
    with open(path, "rb") as fh:
        return decode_wav(fh.read())


def encode_wav(clip: AudioClip) -> bytes:
    """PCM16 encoder, used for synthetic datasets and round-trip tests."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.T.tobytes()
    ch = clip.channels
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(body), b"WAVE", b"fmt ", 16, _PCM, ch,
                         clip.sample_rate, clip.sample_rate * 2 * ch, 2 * ch, 16, b"data", len(body))
    return header + body


def write_wav(path, clip: AudioClip) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_wav(clip))


def _kernel_table(cutoff: float, width: int, phases: int) -> np.ndarray:
    """Windowed-sinc taps for fractional offsets ``p / phases``; row ``phases`` repeats row 0 shifted."""
    frac = np.arange(phases + 1)[:, None] / phases
    dist = frac + np.arange(width - 1, -width - 1, -1)[None, :]
    win = 0.42 + 0.5 * np.cos(np.pi * dist / width) + 0.08 * np.cos(2 * np.pi * dist / width)
    win[np.abs(dist) >= width] = 0.0
    return cutoff * np.sinc(cutoff * dist) * win


def sinc_resample(x: np.ndarray, ratio: float, half_width: int = 64, phases: int = 512) -> np.ndarray:
    """Resample the last axis of ``x`` by ``ratio`` (output/input rate).

    Polyphase windowed-sinc interpolation: output sample ``i`` sits at input
    position ``i / ratio``; its taps come from a Blackman-windowed sinc table
    with ``phases`` fractional offsets, linearly interpolated between
    neighbouring phases. The cutoff drops to ``ratio`` when downsampling.
    Output length is ``round(len * ratio)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n_in = x.shape[-1]
    n_out = int(round(n_in * ratio))
    cutoff = min(1.0, ratio)
    width = int(np.ceil(half_width / cutoff))
    table = _kernel_table(cutoff, width, phases)
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(width, width + 1)])
    t = np.arange(n_out) / ratio
    base = np.floor(t).astype(np.int64)
    pos = (t - base) * phases
    p0 = np.minimum(pos.astype(np.int64), phases - 1)
    a = pos - p0
    out = np.zeros(x.shape[:-1] + (n_out,))
    # tap j reads input base - width + 1 + j, i.e. padded index base + 1 + j
    for j in range(2 * width):
        h = (1.0 - a) * table[p0, j] + a * table[p0 + 1, j]
        out += padded[..., base + 1 + j] * h
    return out


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    y = sinc_resample(clip.samples, target_rate / clip.sample_rate)
    return AudioClip(y, target_rate)


def to_mono(clip: AudioClip) -> AudioClip:
    if clip.channels == 1:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    return AudioClip(clip.samples.mean(axis=0, keepdims=True), clip.sample_rate)


def fit_samples(x: np.ndarray, target: int) -> np.ndarray:
    """Center-crop or zero-pad the last axis to ``target`` samples (extra pad goes right)."""
    if target <= 0:
        raise ValueError(f"target length must be positive, got {target}")
    n = x.shape[-1]
    if n == target:
        return x.copy()
    if n > target:
        start = (n - target) // 2
        return x[..., start:start + target].copy()
    left = (target - n) // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(left, target - n - left)]
    return np.pad(x, pad)


def fit_length(clip: AudioClip, target_samples: int) -> AudioClip:
    return AudioClip(fit_samples(clip.samples, target_samples), clip.sample_rate)


def load_clip(path, target_samples: int | None = None, mono: bool = False) -> AudioClip:
    """Decode, resample to 44.1 kHz and optionally collapse channels / fit the length."""
    clip = resample(read_wav(path), TARGET_RATE)
    if mono:
        clip = to_mono(clip)
    if target_samples is not None:
        clip = fit_length(clip, target_samples)
    return clip
