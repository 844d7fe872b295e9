"""Multi-surface 3D reconstruction from single-photon lidar histograms."""

__version__ = "0.1.0"
