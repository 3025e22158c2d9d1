"""Volumetric segmentation micro-framework: numpy tensors, tape autodiff,
feature-variation and progressive atrous pyramid blocks, and an Adam trainer."""

__version__ = "0.1.0"
