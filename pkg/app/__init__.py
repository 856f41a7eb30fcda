import os
import sys

BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

# BLAS thread pin has to be set before numpy is first imported.
# bench-rtf always measures on one thread; reproducibility mode implies one thread.
_bench = sys.argv[1:2] == ["bench-rtf"]
_threads = "1" if _bench else os.getenv("DFC_THREADS")
if not _threads and os.getenv("DFC_REPRODUCIBLE", "").strip().lower() in ("1", "true", "yes", "on"):
    _threads = "1"
if _threads:
    for _var in BLAS_THREAD_VARS:
        if _bench:
            os.environ[_var] = _threads
        else:
            os.environ.setdefault(_var, _threads)
