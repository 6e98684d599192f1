"""Runtime switch between numba-jitted kernels and their numpy twins.

The environment variable ``TAILRISK_NUMBA`` picks the path once, at import
time: ``0``/``false``/``no``/``off`` forces the pure-numpy implementations,
anything else (or an unset variable) uses the jitted build whenever numba
imports cleanly. Every kernel has both implementations, so the flag changes
speed, not results (agreement is float round-off; see ``tailrisk._kernels``).
"""

import os
import warnings

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

_OFF = frozenset({"0", "false", "no", "off"})
_flag = os.environ.get("TAILRISK_NUMBA", "").strip().lower()

if _flag in _OFF:
    USE_NUMBA = False
else:
    if _flag and not HAVE_NUMBA:
        warnings.warn(
            "TAILRISK_NUMBA requested the jitted kernels but numba is not "
            "importable; falling back to the numpy implementations.",
            RuntimeWarning,
            stacklevel=2,
        )
    USE_NUMBA = HAVE_NUMBA

ACTIVE_PATH = "numba" if USE_NUMBA else "numpy"
