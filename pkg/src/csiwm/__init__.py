"""Self-supervised homomorphic world model for wireless CSI."""

__version__ = "0.1.0"
