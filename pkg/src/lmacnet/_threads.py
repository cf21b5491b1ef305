"""Apply the LMAC_THREADS cap before numpy binds its BLAS thread pools.

Imported first by the package __init__; only effective if lmacnet is
imported before numpy in the process (always true for the CLI entry
point).
"""

import os

_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def apply_thread_cap() -> None:
    cap = os.environ.get("LMAC_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ValueError(f"LMAC_THREADS must be a positive integer, got {cap!r}")
    for var in _BLAS_VARS:
        os.environ.setdefault(var, cap)


apply_thread_cap()
