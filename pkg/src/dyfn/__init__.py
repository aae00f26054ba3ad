"""Streaming stabilisation of feature statistics for temporally consistent
monocular geometry, with a synthetic desk-scale backbone."""

__version__ = "0.1.0"
