"""Hot numerical kernels with a compiled backend and a pure-Python fallback.

The compiled module is used when it imports; set ``IDCF_PURE_PYTHON=1`` to
force the fallback. Both backends produce bit-identical results.
"""

import os

import numpy as np

from . import _pykernels

_impl = _pykernels
BACKEND = "python"

if os.environ.get("IDCF_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def _i64(x):
    return np.ascontiguousarray(x, dtype=np.int64)


def matmul(a, b):
    return _impl.matmul(_f64(a), _f64(b))


def rowdot(a, b):
    return _impl.rowdot(_f64(a), _f64(b))


def segment_sum(indptr, indices, x):
    return _impl.segment_sum(_i64(indptr), _i64(indices), _f64(x))


def scatter_add_rows(target, indices, rows):
    """In place: target[indices[j]] += rows[j], sequentially in j."""
    if target.dtype != np.float64:
        raise TypeError("scatter target must be float64")
    _impl.scatter_add_rows(target, _i64(indices), _f64(rows))


def adam_update(value, grad, m, v, lr, beta1, beta2, step, eps):
    """In-place bias-corrected Adam update of ``value``, ``m`` and ``v``."""
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    args = (lr, beta1, 1.0 - beta1, beta2, 1.0 - beta2, bc1, bc2, eps)
    if _impl is _pykernels:
        _impl.adam_update(value, grad, m, v, *args)
    else:
        _impl.adam_update(
            value.reshape(-1), np.ascontiguousarray(grad, dtype=np.float64).reshape(-1),
            m.reshape(-1), v.reshape(-1), *args,
        )


def backend_module(name):
    """Return the raw kernel module for ``name`` ('python' or 'cython')."""
    if name == "python":
        return _pykernels
    from . import _ckernels

    return _ckernels


def set_backend(name):
    """Switch every wrapper to ``name`` ('python' or 'cython'); returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    _impl = backend_module(name)
    BACKEND = name
    return prev
