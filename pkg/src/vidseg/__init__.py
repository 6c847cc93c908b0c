"""Desk-scale video instance segmentation with multi-scale temporal attention."""

import os

# Cap BLAS threading before numpy is first imported anywhere in the package.
_cap = os.environ.get("VIDSEG_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

__version__ = "0.1.0"
