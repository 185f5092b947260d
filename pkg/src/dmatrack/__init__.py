"""Full-duplex metasurface-array link simulator with near-field target tracking."""

__version__ = "0.1.0"
