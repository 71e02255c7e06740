"""Submap-based 3D sonar SLAM: registration, pose graphs, TSDF mapping and a simulator."""

__version__ = "0.1.0"
