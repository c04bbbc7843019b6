"""Multi-stage attentive transfer learning toolkit.

Core pieces: a float64 autodiff substrate, residual backbones with optional
self-attention insertion, the multi-scale self-supervised objective
(contrastive + region-aware), LEEP transferability scoring, classification
metrics, a deterministic lung-phantom benchmark, and a staged training
pipeline exposed through a FastAPI service with a thin CLI client.
"""

__version__ = "0.1.0"
