"""thermotrack: language-guided RGB-thermal single-object tracking at desk scale."""

__version__ = "0.1.0"
