"""telewheel: desk-scale tele-operated wheelchair simulator and operator link."""

__version__ = "0.1.0"
