"""Mono-prior-guided recurrent stereo depth with dynamic low-rank adaptation."""

__version__ = "0.1.0"
