"""Self-supervised cycle tracking with prompt/noise context tokens, at desk scale."""

__version__ = "0.1.0"
