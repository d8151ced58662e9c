"""Multi-view geometry learning with factored flow supervision on synthetic scenes."""

__version__ = "0.1.0"
