"""Particle solver and maximum-principle optimizer for controlled nonlocal balance laws."""
__version__ = "0.1.0"
