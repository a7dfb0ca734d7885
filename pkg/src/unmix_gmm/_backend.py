"""Pick the kernel implementation at import time.

``UNMIX_GMM_BACKEND=python`` forces the NumPy fallback and
``UNMIX_GMM_BACKEND=compiled`` makes a missing extension an import error.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _kernels_py


def _load_compiled() -> ModuleType | None:
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
_choice = os.environ.get("UNMIX_GMM_BACKEND", "auto").lower()

if _choice == "python":
    kernels: ModuleType = _kernels_py
elif _choice == "compiled":
    if _compiled is None:
        raise ImportError("UNMIX_GMM_BACKEND=compiled but unmix_gmm._kernels is not built")
    kernels = _compiled
else:
    kernels = _compiled if _compiled is not None else _kernels_py

BACKEND: str = kernels.NAME


def available() -> dict[str, ModuleType]:
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


def get(name: str) -> ModuleType:
    try:
        return available()[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None
