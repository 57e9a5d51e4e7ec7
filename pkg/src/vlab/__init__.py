"""Desk-scale video-language pre-training with feature adapting and blending."""

__version__ = "0.1.0"
