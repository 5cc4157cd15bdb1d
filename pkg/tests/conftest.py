"""Pin BLAS pools to one thread before numpy loads, so the acceptance
runtime budgets are measured single-threaded."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
