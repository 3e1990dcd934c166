"""Training-free multi-view detection and 6D pose estimation of rigid objects."""

__version__ = "0.1.0"
