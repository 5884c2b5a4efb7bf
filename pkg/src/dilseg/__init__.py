"""Prostate dominant-lesion segmentation toolkit for ADC MRI."""

__version__ = "0.1.0"
