"""Environmental sound classification with ESResNet on log-power STFT spectrograms."""

__version__ = "0.1.0"
