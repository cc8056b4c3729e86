"""Gaussian weight algebra and evaluation statistics for consolidated
segmentation networks.

The compiled extension does the work; this package finds it either installed
alongside (wheel layout) or via the DWC_MODULE_DIR environment variable when
running against a plain CMake build tree.
"""

import os
import sys

try:
    from ._dwc import *  # noqa: F401,F403
    from . import _dwc as _impl
except ImportError:  # build-tree layout
    _dir = os.environ.get("DWC_MODULE_DIR")
    if not _dir:
        raise
    sys.path.insert(0, _dir)
    from _dwc import *  # noqa: F401,F403
    import _dwc as _impl

__all__ = [name for name in dir(_impl) if not name.startswith("_")]
