"""Object-to-object pixel correspondences and dense descriptors across sim and pseudo-real domains."""

__version__ = "0.1.0"
