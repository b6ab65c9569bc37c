"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly, unless the
environment variable ``SPARSE_BVM_PURE_PYTHON`` is set to a non-empty value
other than ``0``.  ``BACKEND`` names the active implementation.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_force_py = os.environ.get("SPARSE_BVM_PURE_PYTHON", "") not in ("", "0")
_compiled = None
if not _force_py:
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def get_backend(name: str | None = None):
    """Return the kernel module ``name`` ('compiled' or 'python'), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def compiled_available() -> bool:
    return _compiled is not None


def fit_supports(X, y, tau, kind, r, cols, parent=None, init=None, alpha=1.0, prior_prec=0.0,
                 max_iter=200, gtol=1e-8, xtol=1e-10, beta_cap=100.0, backend=None):
    impl = get_backend(backend)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    k, pmax = cols.shape
    parent = np.full(k, -1, dtype=np.int64) if parent is None else np.ascontiguousarray(parent, dtype=np.int64)
    init = np.zeros((k, pmax)) if init is None else np.ascontiguousarray(init, dtype=float)
    return impl.fit_supports(np.ascontiguousarray(X, dtype=float), np.ascontiguousarray(y, dtype=float),
                             np.ascontiguousarray(tau, dtype=float), int(kind), float(r), cols, parent,
                             init, float(alpha), float(prior_prec), int(max_iter), float(gtol),
                             float(xtol), float(beta_cap))


def loglik_points(X, y, tau, kind, r, cols, B, backend=None):
    impl = get_backend(backend)
    B = np.ascontiguousarray(np.atleast_2d(B), dtype=float)
    return impl.loglik_points(np.ascontiguousarray(X, dtype=float), np.ascontiguousarray(y, dtype=float),
                              np.ascontiguousarray(tau, dtype=float), int(kind), float(r),
                              np.ascontiguousarray(cols, dtype=np.int64), B)
