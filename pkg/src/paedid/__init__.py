"""Patch autoencoder deep image decomposition (PAEDID) for unsupervised defect segmentation."""

__version__ = "0.1.0"
