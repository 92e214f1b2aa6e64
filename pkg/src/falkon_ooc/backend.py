"""Selects the compiled fused core or the numpy fallback at import time.

Set ``FALKON_OOC_PURE_PYTHON=1`` to force the fallback.
"""
import logging
import os

logger = logging.getLogger(__name__)

if os.environ.get("FALKON_OOC_PURE_PYTHON"):
    from . import _fused_py as fused
else:
    try:
        from . import _fused as fused
    except ImportError:  # extension not built
        logger.info("compiled core unavailable, using numpy fallback")
        from . import _fused_py as fused

from . import _fused_py as fused_fallback

NAME = "compiled" if fused.compiled() else "python"

__all__ = ["fused", "fused_fallback", "NAME"]
