import os
import sys

# single-threaded BLAS before numpy loads: deterministic reductions
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))  # allow `import oracles`
