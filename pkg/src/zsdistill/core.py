"""Dense kernels: products, row normalization, stable softmax / logsumexp.

Matrices are plain 2-D numpy arrays. Everything here is dtype-preserving so
the same code runs in float64 for training and in extended precision for the
finite-difference oracle.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateRowError, ShapeError

DEFAULT_EPS = 1e-12


def as_matrix(data, dtype=np.float64) -> np.ndarray:
    """Validate and coerce ``data`` into a finite 2-D array."""
    m = np.asarray(data, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError("matrix contains NaN or Inf entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(m * m, axis=1))


def l2_normalize_rows(m: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    norms = row_norms(m)
    bad = np.flatnonzero(norms <= eps)
    if bad.size:
        raise DegenerateRowError(
            f"{bad.size} row(s) with norm <= {eps:g} (first: row {bad[0]}); "
            "embedding has collapsed"
        )
    return m / norms[:, None]


def logsumexp_rows(m: np.ndarray) -> np.ndarray:
    mx = np.max(m, axis=1, keepdims=True)
    return (mx + np.log(np.sum(np.exp(m - mx), axis=1, keepdims=True)))[:, 0]


def logsumexp_row(v) -> float:
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"logsumexp_row expects a non-empty vector, got {v.shape}")
    return logsumexp_rows(v[None, :])[0]


def log_softmax_rows(m: np.ndarray) -> np.ndarray:
    return m - logsumexp_rows(m)[:, None]


def stable_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)
