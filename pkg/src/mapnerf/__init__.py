"""Map-prior guided radiance-field training on a dense voxel grid."""

import os

import numba

# the TBB layer shipped here is too old; pick a layer without the noisy probe
numba.config.THREADING_LAYER = os.environ.get("NUMBA_THREADING_LAYER", "omp")

_threads = int(os.environ.get("MAPNERF_THREADS", "0") or 0)
if _threads > 0:
    numba.set_num_threads(min(_threads, numba.config.NUMBA_NUM_THREADS))

__version__ = "0.1.0"
