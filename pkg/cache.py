from functools import lru_cache
from typing import Tuple

import numpy as np


@lru_cache(maxsize=64)
def identity_coords(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Cached pixel-center coordinate meshes (rows, cols) in float64"""
    rows, cols = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


@lru_cache(maxsize=128)
def pad_fold_matrix(size: int, pad: int, periodic: bool) -> np.ndarray:
    """Matrix folding a padded axis of length size + 2*pad back onto size.

    Row i sums every padded position whose source index is i; with zero
    padding the border positions have no source and are dropped.
    """
    fold = np.zeros((size, size + 2 * pad), dtype=np.float64)
    for k in range(size + 2 * pad):
        src = k - pad
        if periodic:
            fold[src % size, k] = 1.0
        elif 0 <= src < size:
            fold[src, k] = 1.0
    fold.setflags(write=False)
    return fold
