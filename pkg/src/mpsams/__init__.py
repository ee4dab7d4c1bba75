"""Masked-patch selection (MPS) and adaptive masking (AMS) for masked image
modeling pretraining, followed by segmentation fine-tuning."""

__version__ = "0.1.0"
