"""Semi-supervised 3D cephalometric landmark detection on synthetic skulls."""

__version__ = "0.1.0"
