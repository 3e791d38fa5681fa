"""Multi-submodule spatial attention for video person re-identification, in numpy."""

__version__ = "0.1.0"
