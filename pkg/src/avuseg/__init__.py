"""Accuracy-vs-uncertainty training and uncertainty-error evaluation for segmentation.

Importing the package is cheap: submodules (and numpy) load on first use,
so the CLI can set BLAS thread variables before numpy starts.
"""

__version__ = "0.1.0"
