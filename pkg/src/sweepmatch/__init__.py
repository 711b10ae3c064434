"""Intra-sweep contrastive frame retrieval for tracked ultrasound-style
sweep videos, with a learnable rejection threshold."""

__version__ = "0.1.0"
