"""Homoenergetic kinetic theory: particle, mean-field, Boltzmann and hydrodynamic levels."""

__version__ = "0.1.0"
