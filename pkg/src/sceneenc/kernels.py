"""Hot-kernel dispatch: compiled extension when built, numpy otherwise.

Set ``SCENEENC_PURE=1`` to force the numpy path.
"""
import os

from . import _knn_py

try:
    if os.environ.get("SCENEENC_PURE", "") not in ("", "0"):
        raise ImportError("pure mode requested")
    from ._ext import _knn as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _knn_py.knn_batch}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled.knn_batch

BACKEND = "compiled" if _compiled is not None else "python"
knn_batch = BACKENDS[BACKEND]
