"""Disambiguation detection and multimodal coreference for situated dialogue."""

__version__ = "0.1.0"
