"""Multimodal graph learning benchmark: encoders, aligners and VLM predictors over one graph model."""

from __future__ import annotations

__all__ = ["__version__"]

__version__ = "0.1.0"
