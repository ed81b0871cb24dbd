"""Hot-loop kernels with a compiled core and a pure-Python fallback.

The compiled extension (``_fast``, built from Cython) is preferred and is
selected at import time. Set ``INTENTMINE_PURE_PYTHON=1`` to force the
pure-Python reference implementation; both produce identical results.
"""

import os

from . import _ref

if os.environ.get("INTENTMINE_PURE_PYTHON") == "1":
    _impl = _ref
    BACKEND = "python"
else:
    try:
        from . import _fast as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _ref
        BACKEND = "python"

levenshtein = _impl.levenshtein
ppr_solve = _impl.ppr_solve
louvain_sweep = _impl.louvain_sweep

__all__ = ["levenshtein", "ppr_solve", "louvain_sweep", "BACKEND"]
