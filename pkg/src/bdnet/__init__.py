"""BDNet: boundary-delineation segmentation of vessel walls, trained from scratch on numpy."""

__version__ = "0.1.0"
