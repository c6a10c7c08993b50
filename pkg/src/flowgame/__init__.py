"""Timing-based flow correlation under an active adversary: detectors, attacks, simulation."""
__version__ = "0.1.0"
