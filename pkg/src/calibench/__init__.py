"""Desk-scale workbench for coarse-to-fine domain adaptation and segmentation-driven planning."""
__version__ = "0.1.0"
