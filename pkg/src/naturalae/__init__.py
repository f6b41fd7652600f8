"""Natural, physically robust adversarial stop signs against a micro detector."""

__version__ = "0.1.0"
