"""Convolution hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension (``srfrn.kernels._fastconv``, Cython) is preferred when
importable; otherwise the numpy implementation takes over. Both produce
bit-identical results. The active backend can be forced with
``set_backend("compiled"|"numpy")`` or the ``SRFRN_BACKEND`` environment
variable (checked once, at import).
"""

import os
import threading

import numpy as np

from . import numpy_backend

try:
    from . import _fastconv
except ImportError:
    _fastconv = None

_BACKENDS = {"numpy": numpy_backend}
if _fastconv is not None:
    _BACKENDS["compiled"] = _fastconv

_active = "compiled" if _fastconv is not None else "numpy"

_env = os.environ.get("SRFRN_BACKEND", "").strip().lower()
if _env and _env != "auto":
    if _env not in _BACKENDS:
        raise ImportError(
            f"SRFRN_BACKEND={_env!r} requested but only {sorted(_BACKENDS)} available"
        )
    _active = _env


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def backend_name() -> str:
    """Name of the backend currently serving im2col/col2im."""
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    _active = name


_local = threading.local()


def scratch(key: str, shape: tuple, dtype) -> np.ndarray:
    """Reusable per-thread work buffer; contents are undefined on return.

    Conv forward/backward route their large intermediates through these so a
    training step does not page-fault hundreds of MB per layer. Never handed
    to callers outside this package.
    """
    store = getattr(_local, "buffers", None)
    if store is None:
        store = _local.buffers = {}
    buf = store.get(key)
    if buf is None or buf.shape != shape or buf.dtype != np.dtype(dtype):
        buf = np.empty(shape, dtype=dtype)
        store[key] = buf
    return buf


def im2col_3x3(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """3x3/pad-1/stride-1 patch matrix of x (B, C, H, W) -> (B, C*9, H*W)."""
    b, c, h, w = x.shape
    shape = (b, c * 9, h * w)
    if out is None:
        out = np.empty(shape, dtype=x.dtype)
    elif out.shape != shape or out.dtype != x.dtype:
        raise ValueError(f"im2col out buffer must be {shape} {x.dtype}")
    _BACKENDS[_active].im2col_3x3(x, out)
    return out


def col2im_3x3(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of im2col_3x3: scatter-add cols (B, C*9, H*W) -> (B, C, H, W)."""
    out = np.zeros(shape, dtype=cols.dtype)
    _BACKENDS[_active].col2im_3x3(cols, out)
    return out
