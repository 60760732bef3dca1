"""Foreground segmentation with a triplet multi-scale encoder and a
transposed-convolution decoder, implemented on plain numpy arrays.

Kept import-light on purpose: the command line entry point needs to pin
BLAS thread environment variables before numpy loads, so nothing here may
import numpy (directly or through a submodule).
"""

__version__ = "0.1.0"
