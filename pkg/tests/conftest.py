import os
import sys

# Pin BLAS to one thread before numpy is first imported: the package's arrays
# are tiny (thread fan-out costs more than it saves) and single-threaded BLAS
# keeps runs bitwise reproducible.
if "numpy" not in sys.modules:
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("MKL_NUM_THREADS", "1")
