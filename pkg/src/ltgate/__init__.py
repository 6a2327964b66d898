"""Dual-timescale gated spiking neurons with surrogate-gradient training.

The package simulates networks of LT-Gate neurons (two leaky
integrate-and-fire compartments per neuron, blended by a learned gate),
trains them with backpropagation through time, and provides a
continual-learning harness for frequency-shifted rate-coded inputs.
"""

import os

# Cap BLAS worker threads before numpy is imported anywhere in the
# package. Must happen at import time: the console entry point imports
# this module first.
_threads = os.environ.get("LTGATE_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
