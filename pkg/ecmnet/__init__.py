# ecmnet/__init__.py
"""ECMNet: lightweight CNN and selective-scan semantic segmentation."""

__version__ = "0.1.0"
