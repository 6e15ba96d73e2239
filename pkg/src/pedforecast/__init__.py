"""Pedestrian perception and occupancy forecasting on synthetic BEV scenes."""

__version__ = "0.1.0"
