"""Behavior-clustered pedestrian trajectory encoding and reachability prediction."""

__version__ = "0.1.0"
