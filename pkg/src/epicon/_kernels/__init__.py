"""Numeric kernel dispatch: compiled core when available, numpy otherwise.

The active backend is picked at import time (compiled if it built, else
numpy) and can be overridden with the EPICON_BACKEND environment variable
(``numpy``, ``cython``, or ``auto``) or swapped at runtime with
:func:`set_backend` — the benchmark suite uses the latter to compare both
on identical workloads.
"""

from __future__ import annotations

import os

import numpy as np

from . import _numpy_backend

_BACKENDS = {"numpy": _numpy_backend}
try:
    from . import _core as _compiled_backend

    _BACKENDS["cython"] = _compiled_backend
except ImportError:
    _compiled_backend = None

_requested = os.environ.get("EPICON_BACKEND", "auto")
if _requested == "auto":
    _active = _BACKENDS.get("cython", _numpy_backend)
elif _requested in _BACKENDS:
    _active = _BACKENDS[_requested]
else:
    raise ImportError(
        f"EPICON_BACKEND={_requested!r} not available; "
        f"choices: auto, {', '.join(sorted(_BACKENDS))}"
    )


def backend_name() -> str:
    return "cython" if _active is _compiled_backend else "numpy"


def available_backends() -> dict:
    """Name -> module for every importable backend."""
    return dict(_BACKENDS)


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {sorted(_BACKENDS)}")
    _active = _BACKENDS[name]


def _c64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def sqdist(x, p) -> np.ndarray:
    """(m,d),(n,d) -> (m,n) pairwise squared euclidean distances."""
    return _active.sqdist(_c64(x), _c64(p))


def sqdist_bwd(x, p, g):
    return _active.sqdist_bwd(_c64(x), _c64(p), _c64(g))


def cos_rows(x, p) -> np.ndarray:
    """(m,d),(n,d) -> (m,n) rowwise cosine similarities."""
    return _active.cos_rows(_c64(x), _c64(p))


def cos_rows_bwd(x, p, c, g):
    return _active.cos_rows_bwd(_c64(x), _c64(p), _c64(c), _c64(g))


def row_softmax(s) -> np.ndarray:
    return _active.row_softmax(_c64(s))
