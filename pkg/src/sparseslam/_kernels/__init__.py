"""Hot-kernel dispatch: compiled extension when built, numpy otherwise.

``BACKEND`` reports which implementation is active. Force the fallback by
setting SPARSESLAM_NO_NATIVE=1 before import (used by the benchmark and the
backend-parity tests).
"""

import os

from . import _numpy as _np_impl

if os.environ.get("SPARSESLAM_NO_NATIVE"):
    _impl = _np_impl
    BACKEND = "numpy"
else:
    try:
        from . import _native as _impl
        BACKEND = "native"
    except ImportError:
        _impl = _np_impl
        BACKEND = "numpy"

max_filter = _impl.max_filter
cell_lookup = _impl.cell_lookup
translation_score_field = _impl.translation_score_field
raycast_update = _impl.raycast_update

numpy_impl = _np_impl
