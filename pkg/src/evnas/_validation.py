"""Input checks shared by the estimator classes."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length


def check_images(X, *, n_channels: int | None = None, size: int | None = None) -> np.ndarray:
    """Return ``X`` as float32 (n, c, h, w) with h == w.

    Accepts (n, h, w) single-channel stacks, (n, c, h, w) arrays, or flat
    (n, h*w) rows of square single-channel images.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        X = check_array(X, dtype=np.float32)
        side = int(round(np.sqrt(X.shape[1])))
        if side * side != X.shape[1]:
            raise ValueError(f"flat rows of length {X.shape[1]} are not square images")
        X = X.reshape(len(X), 1, side, side)
    elif X.ndim == 3:
        X = check_array(X, dtype=np.float32, allow_nd=True)[:, None]
    elif X.ndim == 4:
        X = check_array(X, dtype=np.float32, allow_nd=True)
    else:
        raise ValueError(f"expected 2-, 3- or 4-D image input, got {X.ndim}-D")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValueError(f"expected {n_channels} channel(s), got {X.shape[1]}")
    if size is not None and X.shape[2] != size:
        raise ValueError(f"expected {size}x{size} images, got {X.shape[2]}x{X.shape[3]}")
    return X


def check_image_labels(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X)
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    check_consistent_length(X, y)
    return X, y


def check_arch_array(A, num_edges: int, num_ops: int) -> np.ndarray:
    """Stack of architecture parameters as float64 (n, 2, edges, ops).

    A single (2, edges, ops) array is promoted to a stack of one.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 3:
        A = A[None]
    if A.ndim != 4 or A.shape[1:] != (2, num_edges, num_ops):
        raise ValueError(f"expected shape (n, 2, {num_edges}, {num_ops}), got {A.shape}")
    if not np.isfinite(A).all():
        raise ValueError("architecture parameters must be finite")
    return A
