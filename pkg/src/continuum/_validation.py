"""Input checks shared by the estimator and the command-line driver."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, in_channels: int | None = None, multiple: int = 1) -> np.ndarray:
    """Return ``X`` as finite float64 ``[N,C,H,W]``; a bare ``[N,H,W]`` gains a channel axis."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_all_finite=True, ensure_2d=False)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"images must be [N,C,H,W] or [N,H,W], got shape {X.shape}")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ValueError(f"expected {in_channels} input channel(s), got {X.shape[1]}")
    h, w = X.shape[2:]
    if h % multiple or w % multiple:
        raise ValueError(f"spatial size {h}x{w} must be divisible by {multiple}")
    return X


def check_masks(Y, images: np.ndarray) -> np.ndarray:
    """Binary ``[N,1,H,W]`` masks matching ``images`` in batch and spatial size."""
    Y = check_array(Y, dtype=np.float64, allow_nd=True, ensure_all_finite=True, ensure_2d=False)
    if Y.ndim == 3:
        Y = Y[:, None]
    if Y.ndim != 4 or Y.shape[1] != 1:
        raise ValueError(f"masks must be [N,1,H,W] or [N,H,W], got shape {Y.shape}")
    if Y.shape[0] != images.shape[0] or Y.shape[2:] != images.shape[2:]:
        raise ValueError(f"mask shape {Y.shape} does not match image shape {images.shape}")
    if not np.isin(Y, (0.0, 1.0)).all():
        raise ValueError("masks must be binary")
    return Y


def parse_list(text: str, cast=float) -> list:
    """Comma-separated values, e.g. ``"0,0.2,0.4"``."""
    items = [s.strip() for s in str(text).split(",") if s.strip()]
    if not items:
        raise ValueError(f"empty list: {text!r}")
    return [cast(s) for s in items]
