"""Log-power STFT front-end and the three-band channel mapping."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import AudioClip

BH_COEFFS = (0.35875, 0.48829, 0.14128, 0.01168)

CACHE_MAGIC = b"ESRS"
CACHE_VERSION = 1


class SignalTooShortError(ValueError):
    pass


class SpectrogramShapeError(ValueError):
    pass


@dataclass(frozen=True)
class FrontEndConfig:
    sample_rate: int = 44100
    frame_ms: float = 37.5
    overlap: float = 0.661
    fft_size: int | None = None
    bands: int = 3
    epsilon_power: float = 1e-12

    @property
    def frame_len(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    @property
    def hop(self) -> int:
        return self.frame_len - int(round(self.overlap * self.frame_len))

    @property
    def n_fft(self) -> int:
        if self.fft_size is not None:
            return self.fft_size
        return 1 << (self.frame_len - 1).bit_length()

    @property
    def band_height(self) -> int:
        return (self.n_fft // 2 + 1) // self.bands

    def num_frames(self, length: int) -> int:
        if length < self.frame_len:
            raise SignalTooShortError(f"signal of {length} samples is shorter than one frame ({self.frame_len})")
        return (length - self.frame_len) // self.hop + 1

    def __post_init__(self):
        if self.n_fft < self.frame_len:
            raise ValueError(f"fft size {self.n_fft} is smaller than the frame length {self.frame_len}")
        if not 0 <= self.overlap < 1 or self.hop < 1:
            raise ValueError(f"overlap {self.overlap} leaves no hop")
        if self.epsilon_power <= 0:
            raise ValueError("epsilon_power must be positive")


def blackman_harris(k, N: int):
    """Periodic minimum 4-term Blackman-Harris window value(s) at index ``k`` of ``N``."""
    a0, a1, a2, a3 = BH_COEFFS
    k = np.mod(np.asarray(k, dtype=np.float64), N)
    # fold onto the first half so w[k] and w[N - k] are bit-identical
    x = 2.0 * np.pi * np.minimum(k, N - k) / N
    return a0 - a1 * np.cos(x) + a2 * np.cos(2 * x) - a3 * np.cos(3 * x)


def blackman_harris_window(N: int) -> np.ndarray:
    return blackman_harris(np.arange(N), N)


def frame_signal(samples: np.ndarray, cfg: FrontEndConfig = FrontEndConfig()) -> np.ndarray:
    """Overlapping frames as a (frames x frame_len) view; trailing samples are dropped."""
    x = np.asarray(samples, dtype=np.float64)
    count = cfg.num_frames(len(x))
    starts = np.arange(count) * cfg.hop
    return x[starts[:, None] + np.arange(cfg.frame_len)[None, :]]


def stft(samples: np.ndarray, cfg: FrontEndConfig = FrontEndConfig()) -> np.ndarray:
    """Complex STFT, shape (n_fft/2 + 1) x frames.

    Frames are windowed, reflection-padded to ``n_fft`` (edge sample not
    repeated, extra sample on the right if the pad is odd) and transformed.
    """
    frames = frame_signal(samples, cfg) * blackman_harris_window(cfg.frame_len)
    pad = cfg.n_fft - cfg.frame_len
    left = pad // 2
    if pad:
        frames = np.pad(frames, ((0, 0), (left, pad - left)), mode="reflect")
    return np.fft.rfft(frames, n=cfg.n_fft, axis=1).T


def log_power(X: np.ndarray, epsilon_power: float = 1e-12) -> np.ndarray:
    if epsilon_power <= 0:
        raise ValueError("epsilon_power must be positive")
    power = X.real ** 2 + X.imag ** 2
    return 10.0 * np.log10(np.maximum(power, epsilon_power))


def band_split(S: np.ndarray, cfg: FrontEndConfig = FrontEndConfig()) -> np.ndarray:
    """Stack equal-height frequency bands as channels; top remainder rows are dropped."""
    rows = cfg.n_fft // 2 + 1
    if S.ndim != 2 or S.shape[0] != rows:
        raise SpectrogramShapeError(f"expected {rows} frequency rows, got shape {S.shape}")
    h = cfg.band_height
    return np.stack([S[b * h:(b + 1) * h] for b in range(cfg.bands)])


def spectrogram(samples: np.ndarray, cfg: FrontEndConfig = FrontEndConfig()) -> np.ndarray:
    """bands x band_height x frames log-power image (float32) of one channel."""
    S = log_power(stft(samples, cfg), cfg.epsilon_power)
    return band_split(S, cfg).astype(np.float32)


def extract_features(clip: AudioClip, cfg: FrontEndConfig = FrontEndConfig()) -> list[np.ndarray]:
    """One spectrogram per audio channel."""
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip is at {clip.sample_rate} Hz, front-end expects {cfg.sample_rate} Hz")
    return [spectrogram(ch, cfg) for ch in clip.samples]


def save_spectrogram(path, spec: np.ndarray) -> None:
    spec = np.asarray(spec)
    if spec.ndim != 3:
        raise SpectrogramShapeError(f"cache holds bands x bins x frames, got shape {spec.shape}")
    header = CACHE_MAGIC + struct.pack("<H3I", CACHE_VERSION, *spec.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(spec, dtype="<f4").tobytes())


def load_spectrogram(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a spectrogram cache (magic {data[:4]!r})")
    version, *shape = struct.unpack_from("<H3I", data, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    body = data[18:]
    if len(body) != 4 * int(np.prod(shape)):
        raise ValueError(f"{path}: payload size does not match shape {tuple(shape)}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)
