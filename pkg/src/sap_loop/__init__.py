"""Closed-loop plan / execute / verify / recover runtime for tabletop manipulation."""

__version__ = "0.1.0"
