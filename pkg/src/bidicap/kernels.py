"""Hot-kernel backend selection.

The package ships two interchangeable kernel implementations: numba-jitted
(`_kernels_nb`) and pure numpy (`_kernels_np`). Selection happens once at
import time via the BIDICAP_BACKEND environment variable:

    BIDICAP_BACKEND=numba   require numba, fail if unavailable
    BIDICAP_BACKEND=numpy   force the pure-numpy fallback
    unset / "auto"          prefer numba, silently fall back to numpy

`benchmarks/bench_kernels.py` compares the two backends directly.
"""

import os

from . import _kernels_np
from .errors import ConfigError

_requested = os.environ.get("BIDICAP_BACKEND", "auto").lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ConfigError(
        f"BIDICAP_BACKEND must be one of auto|numba|numpy, got {_requested!r}"
    )

backend_name = "numpy"
_impl = _kernels_np
if _requested in ("auto", "numba"):
    try:
        from . import _kernels_nb

        _impl = _kernels_nb
        backend_name = "numba"
    except ImportError:
        if _requested == "numba":
            raise

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
layer_norm_rows = _impl.layer_norm_rows
layer_norm_rows_backward = _impl.layer_norm_rows_backward
scatter_add_rows = _impl.scatter_add_rows
attention_step = _impl.attention_step
adam_update = _impl.adam_update
