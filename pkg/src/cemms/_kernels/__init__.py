"""Kernel backend selection.

Prefers the compiled extension; falls back to the numpy implementation when
the extension was not built.  Set CEMMS_PURE_PYTHON=1 to force the fallback
(used by the benchmark and the backend-equivalence tests).
"""

import os

if os.environ.get("CEMMS_PURE_PYTHON"):
    from cemms._kernels import _fallback as backend
else:
    try:
        from cemms._kernels import _core as backend
    except ImportError:
        from cemms._kernels import _fallback as backend

BACKEND = backend.NAME
pcg = backend.pcg
cell_quadratic = backend.cell_quadratic
