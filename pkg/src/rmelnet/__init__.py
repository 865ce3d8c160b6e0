"""Autoregressive text-to-spectrogram frontend with multi-sample inference and attention reranking."""

__version__ = "0.1.0"
