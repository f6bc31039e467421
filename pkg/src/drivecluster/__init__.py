"""Unsupervised clustering of driving-scenario sequences."""
import os

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the system TBB is older than numba accepts; workqueue is always available
    os.environ["NUMBA_THREADING_LAYER"] = "workqueue"

__version__ = "0.1.0"
