"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
bit-compatible up to floating-point reassociation.  Set HYPERADA_BACKEND to
"python" or "cython" to force one (the benchmark uses this).
"""

import os

from hyperada import _kernels_py

_requested = os.environ.get("HYPERADA_BACKEND", "auto").strip().lower()

if _requested in ("python", "numpy", "py"):
    kernels = _kernels_py
    BACKEND_NAME = "python"
elif _requested in ("auto", "", "cython", "c"):
    try:
        from hyperada import _kernels as _compiled
        kernels = _compiled
        BACKEND_NAME = "cython"
    except ImportError:
        if _requested in ("cython", "c"):
            raise ImportError(
                "HYPERADA_BACKEND=cython requested but hyperada._kernels "
                "is not built; run pip install -e . or unset the variable"
            )
        kernels = _kernels_py
        BACKEND_NAME = "python"
else:
    raise ValueError(
        f"unknown HYPERADA_BACKEND value {_requested!r}; "
        "expected auto, python or cython"
    )
