"""Transformer architecture search with architecture-routed LoRA experts."""

__version__ = "0.1.0"
