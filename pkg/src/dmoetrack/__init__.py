"""Desk-scale multimodal tracker with meta-embedding fusion and dual mixture-of-experts."""

__version__ = "0.1.0"
