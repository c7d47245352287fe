"""Small shared helpers."""

from __future__ import annotations

import math


def ceil_count(fraction: float, n: int) -> int:
    """ceil(fraction * n) with a 1e-9 slack so that products like 0.6*100
    that land a hair above an integer do not round up one too far."""
    if n <= 0:
        return 0
    return max(0, min(n, math.ceil(fraction * n - 1e-9)))
