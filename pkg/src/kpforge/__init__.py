"""kpforge: 2D tool landmark detection trained on synthetic images."""

__version__ = "0.1.0"
