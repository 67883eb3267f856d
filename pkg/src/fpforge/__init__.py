"""Synthetic live and spoof fingerprint generation and evaluation.

Stages: a master-print GAN yields identity ridge maps, a PCA deformation
model warps them into impressions, and per-material texture renderers turn
warped binaries into grayscale captures.  Evaluation covers minutiae
statistics, embedding-based match scores, identity leakage and a two-branch
spoof detector.
"""
from .data import Dataset, ImpressionRecord, load_dataset
from .errors import ForgeError

__all__ = ["Dataset", "ImpressionRecord", "ForgeError", "load_dataset"]
__version__ = "0.1.0"
