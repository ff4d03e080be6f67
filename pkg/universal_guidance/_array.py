"""Shape helpers shared by the numerical modules."""

from typing import Tuple

import numpy as np

from .errors import DimensionMismatchError, NonFiniteError


def as_batch(z, name: str = "z") -> Tuple[np.ndarray, bool]:
    """
    Coerce a vector or batch of vectors to a 2-D float array.

    Returns:
        (array of shape (n, d), True if the input was a single vector)
    """
    arr = np.asarray(z, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise DimensionMismatchError(f"{name} must be a vector or (n, d) batch, got shape {arr.shape}")


def restore(arr: np.ndarray, single: bool) -> np.ndarray:
    """Undo as_batch for an output with a leading batch axis."""
    return arr[0] if single else arr


def check_same_shape(a: np.ndarray, b: np.ndarray, names: str) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"{names}: shapes {a.shape} and {b.shape} differ")


def check_finite(value: np.ndarray, what: str, batched: bool = False, **context) -> None:
    """
    Raise NonFiniteError if any entry of value is NaN or inf.

    With batched=True the leading axis indexes chains and the first bad row
    is reported as the error's chain.
    """
    value = np.asarray(value)
    finite = np.isfinite(value)
    if np.all(finite):
        return
    if batched and value.ndim >= 1 and context.get("chain") is None:
        bad_rows = ~finite.reshape(value.shape[0], -1).all(axis=1)
        context["chain"] = int(np.argmax(bad_rows))
    raise NonFiniteError(f"non-finite {what}", **context)
