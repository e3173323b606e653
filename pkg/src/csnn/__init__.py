"""Distributed simulation of spiking cortical-column grids with lateral connectivity."""

__version__ = "0.1.0"
