"""Dense float32 matrix kernels.

Two execution modes are available. The deterministic mode (the default)
accumulates every dot product in natural index order with float32 rounding
after each multiply and add, so results are bit-identical to a naive triple
loop and independent of BLAS threading. The parallel mode hands products to
numpy's BLAS and is only required to agree with the serial path to within
float32 accumulation error.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Iterator

import numpy as np

DTYPE = np.float32
LAYER_NORM_EPS = 1e-5

_state = threading.local()
_default_deterministic = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class DiagnosticsCounter:
    """Process-wide counters for numerically degenerate inputs."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.degenerate_rows = 0

    def add_degenerate(self, count: int) -> None:
        with self._lock:
            self.degenerate_rows += count

    def reset(self) -> None:
        with self._lock:
            self.degenerate_rows = 0


diagnostics = DiagnosticsCounter()


def is_deterministic() -> bool:
    return getattr(_state, "deterministic", _default_deterministic)


def set_deterministic(flag: bool) -> None:
    """Set the process default used by threads without a local override."""
    global _default_deterministic
    _default_deterministic = bool(flag)


@contextlib.contextmanager
def kernel_mode(deterministic: bool) -> Iterator[None]:
    """Temporarily select the kernel mode for the current thread."""
    prev = getattr(_state, "deterministic", None)
    _state.deterministic = bool(deterministic)
    try:
        yield
    finally:
        if prev is None:
            del _state.deterministic
        else:
            _state.deterministic = prev


def thread_limit() -> int:
    """Worker cap from ``VFSA_THREADS``; 0 means serial."""
    raw = os.environ.get("VFSA_THREADS", "")
    if not raw.strip():
        return os.cpu_count() or 1
    value = int(raw)
    if value < 0:
        raise ValueError(f"VFSA_THREADS must be >= 0, got {value}")
    return value


def as_matrix(x, *, name: str = "matrix") -> np.ndarray:
    """Validate and return ``x`` as a finite 2-D float32 array."""
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    return m


def _check_finite(m: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{op} produced non-finite values")
    m.flags.writeable = False
    return m


def _matmul_ordered(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    tmp = np.empty_like(out)
    for k in range(a.shape[1]):
        np.multiply(a[:, k, None], b[None, k, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if is_deterministic():
        out = _matmul_ordered(a, b)
    else:
        out = np.matmul(a, b)
    return _check_finite(out, "matmul")


def matmul_naive(a, b) -> np.ndarray:
    """Scalar triple loop in float32. Test oracle only; O(n^3) Python."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = DTYPE(0.0)
            for k in range(a.shape[1]):
                acc = DTYPE(acc + DTYPE(a[i, k] * b[k, j]))
            out[i, j] = acc
    return out


def softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    if m.size == 0:
        raise ShapeError("softmax_rows needs a nonempty matrix")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e /= e.sum(axis=-1, keepdims=True)
    return _check_finite(e, "softmax_rows")


def layer_norm_rows(m, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Standardise each row to zero mean and unit variance.

    ``eps`` is the degeneracy threshold: rows whose variance is at most
    ``eps`` come back as zeros and are counted in ``diagnostics``.
    """
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 2 or m.shape[1] < 2:
        raise ShapeError(f"layer_norm_rows needs at least 2 columns, got {m.shape}")
    x = m.astype(np.float64)
    mean = x.mean(axis=1, keepdims=True)
    centred = x - mean
    var = (centred * centred).mean(axis=1, keepdims=True)
    degenerate = var[:, 0] <= eps
    std = np.sqrt(np.where(degenerate[:, None], 1.0, var))
    out = np.where(degenerate[:, None], 0.0, centred / std).astype(DTYPE)
    n_bad = int(degenerate.sum())
    if n_bad:
        diagnostics.add_degenerate(n_bad)
    return _check_finite(out, "layer_norm_rows")


def row_norms(m) -> np.ndarray:
    x = np.asarray(m, dtype=np.float64)
    return np.sqrt((x * x).sum(axis=1))


def unit_norm_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"unit_norm_rows needs a 2-D matrix, got {m.shape}")
    norms = row_norms(m)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"unit_norm_rows: zero-norm rows at {zero.tolist()}")
    out = (m.astype(np.float64) / norms[:, None]).astype(DTYPE)
    return _check_finite(out, "unit_norm_rows")


def linear(x, weight, bias=None) -> np.ndarray:
    """``x @ weight + bias`` with the bias broadcast over rows."""
    out = np.array(matmul(x, weight))
    if bias is not None:
        bias = np.asarray(bias, dtype=DTYPE).reshape(-1)
        if bias.shape[0] != out.shape[1]:
            raise ShapeError(f"bias of length {bias.shape[0]} does not match output width {out.shape[1]}")
        out += bias
    return _check_finite(out, "linear")


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
