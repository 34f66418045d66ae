"""Red blood cell segmentation with overlapping-cell separation by ellipse fitting."""

__version__ = "0.1.0"
