"""Desk-scale RL workbench for tracking a folded tube through voxel phantoms."""

__version__ = "0.1.0"
