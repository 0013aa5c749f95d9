"""Lung-nodule CADe/CADx toolkit: volume I/O, metrics, synthetic EMRs,
embedding fusion and gradient-boosted malignancy scoring."""

__version__ = "0.1.0"
