"""Workbench for random periodic solutions of stochastic feedback systems."""

import os as _os

# cap BLAS/OpenMP pools before numpy loads; the library itself is single-threaded
_threads = _os.environ.get("RPSLAB_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .expr import parse_expr, eval_expr, FeedbackExpr  # noqa: E402
from .system import SystemSpec, FeedbackSpec, SpecError  # noqa: E402
from .specparse import parse_system  # noqa: E402
from .wiener import GridSpec, WienerGrid, Ensemble, sample_path  # noqa: E402

__version__ = "0.1.0"
