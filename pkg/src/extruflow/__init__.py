"""Camera-calibrated extrusion optimization for high-speed FFF printing."""

__version__ = "0.1.0"
