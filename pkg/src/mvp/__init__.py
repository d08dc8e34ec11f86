"""Multimodal (facial video features + ECG/PPG/EDA) emotion recognition with cross-attention fusion."""

__version__ = "0.1.0"
