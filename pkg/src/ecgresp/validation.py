"""Input validation helpers shared by the estimator and pipeline entry points."""

from __future__ import annotations

import numpy as np

from .curation import MINUTE_SAMPLES


def check_segments(X, segment_len: int = MINUTE_SAMPLES, allow_multilead: bool = True) -> np.ndarray:
    """Validate an ECG segment stack.

    Accepts (n, length) or, when allowed, (n, leads, length).  Values must be
    finite; the trailing axis must match the expected segment length.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        pass
    elif X.ndim == 3 and allow_multilead:
        if X.shape[1] < 1:
            raise ValueError("multi-lead input needs at least one lead")
    else:
        raise ValueError(
            f"expected (n, {segment_len}) or (n, leads, {segment_len}) input, got shape {X.shape}"
        )
    if X.shape[-1] != segment_len:
        raise ValueError(f"segments must be {segment_len} samples long, got {X.shape[-1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("segments contain non-finite values")
    return X


def check_paired(X, y, segment_len: int = MINUTE_SAMPLES) -> tuple[np.ndarray, np.ndarray]:
    """Validate a (segments, labels) pair for fitting."""
    X = check_segments(X, segment_len)
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(X) != len(y):
        raise ValueError(f"{len(X)} segments but {len(y)} labels")
    if len(y) == 0:
        raise ValueError("empty dataset")
    if not np.all(np.isfinite(y)):
        raise ValueError("labels contain non-finite values")
    return X, y
