"""Knot-aware sawing-angle optimization for scanned logs.

The pipeline unwraps a log point cloud into a height map, detects surface
knot bumps, turns them into a circular knot distribution, picks the sawing
angle that keeps knots off the board corners, and checks the result with a
virtual sawing simulator.
"""

__version__ = "0.1.0"
