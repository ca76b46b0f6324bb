"""Scale- and location-sensitive losses and a multi-scale-head U-Net for small target detection."""

__version__ = "0.1.0"
