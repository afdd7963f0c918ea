"""Delineate non-administrative urban regions from geo-located point records.

The pipeline filters raw point streams into user trajectories, bins them on a
square fishnet, builds an origin-destination graph of displacements,
partitions that graph with the two-level map equation and checks the result
against a gravity model.
"""

__version__ = "0.1.0"
BUILD_ID = f"urbanbounds {__version__}"
