"""Multimodal self-supervised fusion via InfoNCE objectives, at desk scale."""

__version__ = "0.1.0"
