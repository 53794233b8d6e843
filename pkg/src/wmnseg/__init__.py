"""Thalamic nuclei segmentation from MPRAGE, natively or via synthesized white-matter-nulled contrast."""

__version__ = "0.1.0"
