# safe_tune/__init__.py

# Selective adapter freezing for LoRA fine-tuning on a small numpy transformer.

import os
from typing import MutableMapping, Optional

__version__ = "1.0.0"

BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def configure_blas_threads(environ: Optional[MutableMapping[str, str]] = None) -> Optional[int]:
    """
    Copies SAFE_TUNE_THREADS into the BLAS thread variables that are not already set.
    Only effective before numpy is first imported; the CLI calls it first thing.
    """
    environ = os.environ if environ is None else environ
    raw = environ.get("SAFE_TUNE_THREADS")
    if not raw:
        return None
    try:
        threads = max(1, int(raw))
    except ValueError:
        return None
    for var in BLAS_THREAD_VARS:
        environ.setdefault(var, str(threads))
    return threads
