"""Hot inner loops: conformal counting and per-class label minimization.

The compiled extension is used when it was built; otherwise the numpy
fallback is selected. Set ``CONFIDENCE_ENERGY_PURE=1`` to force the fallback.

Kernels
-------
count_geq(values, offsets, groups, queries)
    For each query ``m``, the number of entries ``>= queries[m]`` in the sorted
    slice ``values[offsets[groups[m]]:offsets[groups[m] + 1]]``.
level_argmin(weights, psi, neglogp, lam)
    For every class ``c`` and row ``i``, the label minimizing
    ``weights[c, y] * psi[i, y] + lam * neglogp[i, c, y]`` (lowest index on
    ties), plus the per-class sum of the minima.
"""

import os

from . import _fallback

BACKEND = "python"
if os.environ.get("CONFIDENCE_ENERGY_PURE") != "1":
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _fallback
    else:
        BACKEND = "cython"
else:
    _impl = _fallback

count_geq = _impl.count_geq
level_argmin = _impl.level_argmin

__all__ = ["BACKEND", "count_geq", "level_argmin", "_fallback"]
