"""Transformer-to-Mamba diffusion distillation at desk scale, on a numpy autodiff engine."""
from __future__ import annotations

__version__ = "0.1.0"
