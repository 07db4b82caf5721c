"""Differentiable CPU Gaussian splatting with blur modeling and SfM-free pose tracking."""
import os

import numba

# TBB in the base image is too old; workqueue needs no extra runtime
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

__version__ = "0.1.0"
