"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy versions.
Set ``MTM_KERNELS=python`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MTM_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _idx(a):
    return np.ascontiguousarray(a, dtype=np.int64).reshape(-1)


def gather_rows(table, ids):
    """``table[ids]`` for a 2-D table and any-shaped integer ``ids``."""
    ids = np.asarray(ids)
    out = _impl.gather_rows(_f64(table), _idx(ids))
    return out.reshape(ids.shape + (table.shape[1],))


def scatter_add_rows(ids, grad, n_rows):
    """Adjoint of :func:`gather_rows` with respect to the table."""
    ids = _idx(ids)
    return _impl.scatter_add_rows(ids, _f64(grad).reshape(ids.shape[0], -1), n_rows)


def softmax_rows(x):
    return _impl.softmax_rows(_f64(x))


def softmax_xent(logits, labels):
    return _impl.softmax_xent(_f64(logits), _idx(labels))
