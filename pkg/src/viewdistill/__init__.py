"""Occlusion-aware view ranking and curriculum cross-view distillation."""

__version__ = "0.1.0"
