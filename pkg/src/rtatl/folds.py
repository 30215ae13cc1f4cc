"""Subject-independent splits."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def make_folds(subjects: Sequence[str], k: int = 3, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """``k`` (train, test) subject splits; every subject is tested exactly once."""
    unique = sorted(set(subjects))
    if len(unique) < k:
        raise ValueError(f"need at least {k} subjects for {k} folds, got {len(unique)}")
    order = np.random.default_rng(seed).permutation(len(unique))
    parts = np.array_split(order, k)
    folds = []
    for part in parts:
        test = sorted(unique[i] for i in part)
        train = sorted(set(unique) - set(test))
        folds.append((train, test))
    return folds


def limited_label_schedule(subjects: Sequence[str], counts=(3, 9, 15, 21, 27),
                           seed: int = 0) -> dict[int, list[str]]:
    """Nested random subject subsets: smaller counts are prefixes of larger ones."""
    unique = sorted(set(subjects))
    for c in counts:
        if c > len(unique):
            raise ValueError(f"requested {c} subjects, only {len(unique)} available")
    order = [unique[i] for i in np.random.default_rng(seed).permutation(len(unique))]
    return {c: sorted(order[:c]) for c in counts}
