"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import EmptyInputError, ShapeError


def check_frames(X, n_features: int | None = None) -> np.ndarray:
    """Validate a 2-D float frame matrix (rows are frames)."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} features per frame, got {X.shape[1]}")
    return X


def check_frame_list(X, n_features: int | None = None) -> list[np.ndarray]:
    """Validate a sequence of per-clip frame matrices sharing one width."""
    if len(X) == 0:
        raise EmptyInputError("no clips given")
    out = [check_frames(x, n_features) for x in X]
    widths = {x.shape[1] for x in out}
    if len(widths) != 1:
        raise ShapeError(f"clips disagree on feature width: {sorted(widths)}")
    return out
