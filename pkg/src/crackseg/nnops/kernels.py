"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy versions
take over. Set ``CRACKSEG_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CRACKSEG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable; using numpy fallback")
    else:
        _impl = _compiled
        BACKEND = "compiled"

im2col = _impl.im2col
col2im = _impl.col2im
depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward


def available_backends():
    """Return ``{name: module}`` for every backend importable in this process."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        found["compiled"] = _compiled
    return found
