"""Backend selection for the hot loops.

The compiled extension is used when importable; set ``MSIID_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active choice.
"""

import os

from . import _kernels_py

if os.environ.get("MSIID_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = _impl.BACKEND
csr_matvec = _impl.csr_matvec
cg_csr = _impl.cg_csr
pair_cosine_distance = _impl.pair_cosine_distance

__all__ = ["BACKEND", "csr_matvec", "cg_csr", "pair_cosine_distance", "_kernels_py"]
