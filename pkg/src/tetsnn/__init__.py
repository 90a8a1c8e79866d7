"""Spiking network training with temporal efficient and standard direct losses."""
__version__ = "0.1.0"
