"""Reward-free trajectory stitching for offline datasets on grid mazes."""

__version__ = "0.1.0"
