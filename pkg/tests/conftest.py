import os

# Pin BLAS thread counts before numpy loads so tiny-matrix reductions are
# partitioned identically across runs (bitwise determinism checks rely on it).
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
