"""Dense float64 helpers used by the model and optimizer code.

Matrices are 2-D ``numpy`` arrays (row-major) and parameter vectors are 1-D
arrays. The functions here only add the shape/domain checks the rest of the
package relies on.
"""

import numpy as np

from .errors import DomainError, ShapeError


def as_matrix(data, rows=None, cols=None):
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 1 and rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ShapeError(f"{a.size} values cannot fill a {rows}x{cols} matrix")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("matrix has non-finite entries")
    return a


def as_vector(data):
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a flat vector, got shape {v.shape}")
    return v


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _check_div(b):
    if np.any(np.asarray(b) == 0.0):
        raise DomainError("division by exact zero; guard the divisor with max_scalar first")


_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max_scalar": np.maximum,
    "scale": np.multiply,
}


def elementwise(op, a, b):
    """Apply ``op`` componentwise.

    ``op`` is one of ``add``, ``sub``, ``mul``, ``div`` (vector or scalar
    right operand), ``max_scalar`` and ``scale`` (scalar right operand).
    """
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a = as_vector(a)
    if op in ("max_scalar", "scale"):
        if np.ndim(b) != 0:
            raise ShapeError(f"{op} takes a scalar right operand")
        b = float(b)
    elif np.ndim(b) != 0:
        b = as_vector(b)
        if b.shape != a.shape:
            raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    if op == "div":
        _check_div(b)
    return fn(a, b)


def row_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"row_softmax expects a matrix, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError("row_softmax input has non-finite entries")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def row_log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
