"""Deterministic quasi-random sample points in a coordinate box."""

from __future__ import annotations

import numpy as np
from scipy.stats import qmc


def halton(box, count: int, seed: int = 0, skip: int = 0) -> np.ndarray:
    """Scrambled Halton points mapped into ``box`` (shape (n, 2)); returns (count, n)."""
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    engine = qmc.Halton(d=len(box), scramble=True, seed=seed)
    if skip:
        engine.fast_forward(skip)
    u = engine.random(count)
    return box[:, 0] + u * (box[:, 1] - box[:, 0])
