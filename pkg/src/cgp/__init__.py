"""Mask-guided Gaussian perturbation training for OOD-robust classification."""

import os

# Desk-scale matrices lose badly to BLAS thread fan-out; default to one
# thread unless the caller chose otherwise. Must happen before numpy loads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
