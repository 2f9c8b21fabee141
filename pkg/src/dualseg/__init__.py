"""Decoupled dual-annotation PET/CT lesion segmentation on a numpy U-Net."""

__version__ = "0.1.0"
