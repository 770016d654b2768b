"""Chest X-ray debiasing pipeline.

Classical operators (equalization, masking, close cropping), a residual
U-Net lung-field segmenter, a convolutional rib suppressor, a two-phase
transfer-learning nodule classifier, an evolutionary hard-example pruner,
and the A-F ablation / external-generalization protocol, with a synthetic
phantom corpus for desk-scale verification.
"""

__version__ = "0.1.0"

from .rasters import GrayImage, LungMask  # noqa: F401
