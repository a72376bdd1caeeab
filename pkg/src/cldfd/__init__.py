"""Cross-level distillation and feature denoising for cross-domain few-shot classification."""

__version__ = "0.1.0"
