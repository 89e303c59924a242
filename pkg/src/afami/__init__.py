"""Adversarial feature augmentation with moment injection for 3D organ segmentation.

Pure numpy: volumes and phantoms, a reverse-mode autodiff engine, a small 3D
U-net, the feature attack used during training, and the evaluation harness.
"""

__version__ = "0.1.0"
