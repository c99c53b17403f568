"""Dense float64 helpers: checked products, row softmax, seeded RNG and
central finite differences.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 (row-major,
C order).  The helpers here add the shape and finiteness checks that the
rest of the package relies on.
"""

from __future__ import annotations

import io
from typing import Callable

import numpy as np

from .errors import InvalidInputError, ShapeError

#: Bit generator behind :func:`make_rng`.  PCG64 (O'Neill 2014, 128-bit LCG
#: state, multiplier 0x2360ED051FC65DA44385DF649FCCF645, XSL-RR output) as
#: shipped by numpy; seeded through SeedSequence so a given integer seed
#: yields the same stream on every platform.
RNG_ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    """Return a fresh PCG64-backed generator for ``seed``.

    One generator must not be shared between threads.
    """
    if seed < 0 or seed >= 2**64:
        raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce ``values`` to a finite 2-D float64 array."""
    m = np.array(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    check_finite(m, name)
    return m


def check_finite(m: np.ndarray, name: str = "matrix") -> None:
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains NaN or Inf")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    The row maximum is subtracted before exponentiating, so saturated
    rows such as ``[1000, 0]`` evaluate to ``[1, 0]`` without overflow.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if np.isnan(logits).any():
        raise InvalidInputError("softmax input contains NaN")
    if not np.isfinite(logits).all():
        raise InvalidInputError("softmax input contains Inf")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`softmax_rows` at output ``probs``."""
    return probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True))


def central_diff(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function.

    Returns ``(f(theta + eps*e_k) - f(theta - eps*e_k)) / (2*eps)`` for every
    coordinate ``k``.  ``theta`` is not modified.
    """
    if not eps > 0:
        raise InvalidInputError(f"eps must be positive, got {eps}")
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.empty(flat.size)
    for k in range(flat.size):
        x = flat.copy()
        x[k] = flat[k] + eps
        fp = f(x.reshape(theta.shape))
        x[k] = flat[k] - eps
        fm = f(x.reshape(theta.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise InvalidInputError(f"non-finite function value at coordinate {k}")
        grad[k] = (fp - fm) / (2 * eps)
    return grad.reshape(theta.shape)


def central_diff_batched(f_batch: Callable[[np.ndarray], np.ndarray], theta, eps: float = 1e-5,
                         chunk: int = 512) -> np.ndarray:
    """Vectorised :func:`central_diff`.

    ``f_batch`` maps a stack of parameter copies ``(K, *theta.shape)`` to
    ``K`` function values.  Each copy differs from ``theta`` in a single
    coordinate, so the result equals :func:`central_diff` on the scalar
    function.
    """
    if not eps > 0:
        raise InvalidInputError(f"eps must be positive, got {eps}")
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    n = flat.size
    grad = np.empty(n)
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(n, lo + chunk))
        k = idx.size
        batch = np.tile(flat, (2 * k, 1))
        batch[np.arange(k), idx] = flat[idx] + eps
        batch[np.arange(k, 2 * k), idx] = flat[idx] - eps
        values = np.asarray(f_batch(batch.reshape((2 * k,) + theta.shape)), dtype=np.float64)
        if values.shape != (2 * k,):
            raise InvalidInputError(f"batched function returned shape {values.shape}, expected {(2 * k,)}")
        if not np.isfinite(values).all():
            raise InvalidInputError("non-finite function value in finite-difference batch")
        grad[idx] = (values[:k] - values[k:]) / (2 * eps)
    return grad.reshape(theta.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps tensors whose true gradient is zero from turning
    round-off noise into an O(1) relative error.
    """
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    if scale == 0.0:
        return diff
    return diff / scale


def read_tsv(source) -> np.ndarray:
    """Parse a headerless TSV matrix from a path or text stream."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    rows = [line.split("\t") for line in text.splitlines() if line.strip()]
    if not rows:
        raise InvalidInputError("empty TSV matrix")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ShapeError(f"TSV row {i} has {len(row)} columns, expected {width}")
    try:
        m = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise InvalidInputError(f"bad TSV value: {exc}") from None
    check_finite(m, "TSV matrix")
    return m


def format_tsv(m: np.ndarray) -> str:
    # repr() round-trips float64 exactly
    m = as_matrix(m)
    buf = io.StringIO()
    for row in m:
        buf.write("\t".join(repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()


def write_tsv(m: np.ndarray, dest) -> None:
    text = format_tsv(m)
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8") as fh:
            fh.write(text)


def matrix_to_json(m: np.ndarray) -> dict:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        return {"shape": [m.shape[0]], "data": m.tolist()}
    return {"shape": list(m.shape), "data": m.reshape(-1).tolist()}


def matrix_from_json(obj: dict, name: str = "matrix") -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        data = np.array(obj["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"{name}: expected {{'shape', 'data'}} object ({exc})") from None
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"{name}: {data.size} values do not fill shape {shape}")
    check_finite(data, name)
    return data.reshape(shape)
