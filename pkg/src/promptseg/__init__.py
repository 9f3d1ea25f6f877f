"""Promptable segmentation of cells and glands: interactive fine-tuning,
two-stage automatic+interactive inference, and an annotation service."""

__version__ = "0.1.0"
