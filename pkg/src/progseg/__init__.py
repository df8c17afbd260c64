"""Progressive semantic and instance segmentation of RGB-D reconstructions."""

__version__ = "0.1.0"
