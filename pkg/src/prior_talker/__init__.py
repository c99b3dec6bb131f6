"""Speech-driven portrait and talking-face generation at desk scale."""

__version__ = "0.1.0"
