"""Rotation-based importance concentration and pruning for toy LLaMA-style models."""

__version__ = "0.1.0"
