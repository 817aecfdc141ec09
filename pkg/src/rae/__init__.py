"""Area-based image registration with per-correspondence accuracy estimation."""

__version__ = "0.1.0"
