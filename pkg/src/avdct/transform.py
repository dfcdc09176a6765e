"""Orthonormal cosine transform pair and the symmetric-convolution identity.

The forward transform maps a block ``x`` of length ``L`` to

    X_i = sqrt(1/L) x_0 + sqrt(2/L) * sum_{l>=1} x_l cos(pi/L (i + 1/2) l)

and the inverse is its transpose. Both are evaluated as a product with a
cached ``L x L`` matrix; the same matrix is what the MAC accountant counts.
All functions act on the last axis, so stacks of blocks work unchanged.
"""

from functools import lru_cache

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "dct_matrix",
    "dct",
    "idct",
    "conv_weights",
    "symmetric_convolve",
]


@lru_cache(maxsize=32)
def _dct_matrix(L: int) -> np.ndarray:
    i = np.arange(L, dtype=np.float64)[:, None]
    l = np.arange(L, dtype=np.float64)[None, :]
    alpha = np.where(l == 0, np.sqrt(1.0 / L), np.sqrt(2.0 / L))
    m = alpha * np.cos(np.pi / L * (i + 0.5) * l)
    m.setflags(write=False)
    return m


def dct_matrix(L: int) -> np.ndarray:
    """Return the read-only ``L x L`` forward matrix ``M`` (``X = M @ x``)."""
    if L < 1:
        raise InvalidInputError(f"block length must be >= 1, got {L}")
    return _dct_matrix(int(L))


def _as_blocks(x, name="block") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] < 1:
        raise InvalidInputError(f"{name} must have a non-empty last axis")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def dct(x) -> np.ndarray:
    x = _as_blocks(x)
    return x @ dct_matrix(x.shape[-1]).T


def idct(X) -> np.ndarray:
    X = _as_blocks(X, "coefficients")
    return X @ dct_matrix(X.shape[-1])


def conv_weights(L: int) -> tuple[np.ndarray, np.ndarray]:
    """Constant vectors ``a`` and ``k = 1/a`` used by the convolution identity."""
    if L < 1:
        raise InvalidInputError(f"block length must be >= 1, got {L}")
    a = np.full(L, np.sqrt(1.0 / (2.0 * L)))
    a[0] = 1.0 / (2.0 * np.sqrt(L))
    return a, 1.0 / a


def symmetric_convolve(x, w) -> np.ndarray:
    """Symmetric convolution of two blocks computed in the cosine domain.

    Evaluates ``idct(dct(x * a) * dct(w * a)) * k``. In the time domain this
    is the skew-circular convolution (period ``2L``) of the even extensions of
    ``x`` and ``w``, divided by ``2L``.
    """
    x = _as_blocks(x, "x")
    w = _as_blocks(w, "w")
    if x.shape[-1] != w.shape[-1]:
        raise InvalidInputError(
            f"length mismatch: x has {x.shape[-1]}, w has {w.shape[-1]}"
        )
    a, k = conv_weights(x.shape[-1])
    return idct(dct(x * a) * dct(w * a)) * k
