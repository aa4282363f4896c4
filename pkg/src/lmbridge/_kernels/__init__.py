"""Hot inner-loop kernels.

Two interchangeable backends: a Cython extension (built by setup.py) and a
pure-Python fallback with the same arithmetic in the same order, so results
match bit for bit.  The compiled backend is picked automatically at import;
set LMBRIDGE_KERNELS=pure to force the fallback.
"""

import os

from lmbridge._kernels import pure

if os.environ.get("LMBRIDGE_KERNELS", "").lower() == "pure":
    _impl = pure
    BACKEND = "pure"
else:
    try:
        from lmbridge._kernels import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = pure
        BACKEND = "pure"

skipgram_pass = _impl.skipgram_pass
ibm1_estep = _impl.ibm1_estep


def backend() -> str:
    """Name of the active kernel backend ("cython" or "pure")."""
    return BACKEND
