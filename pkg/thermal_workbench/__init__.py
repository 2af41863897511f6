"""Physics-informed zone thermal models, their consistency checks, and a SAC supervisory controller."""

__version__ = "0.1.0"
