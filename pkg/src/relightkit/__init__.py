"""Linear HDR merging, split-sum image-based relighting, inverse rendering and
relighting evaluation."""

__version__ = "0.1.0"
