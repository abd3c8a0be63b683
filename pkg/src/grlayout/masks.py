"""Visibility masks: causal history plus block-diagonal candidate rows.

The candidate block is what makes one-pass scoring work: every candidate row
may attend to the whole history and to itself, never to other candidates, and
no history row may attend to any candidate.  With zero candidates this is the
plain causal mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class VisibilityMask:
    allowed: np.ndarray   # (L, L) bool, rows are queries, columns keys
    history_len: int
    candidate_count: int

    @property
    def length(self) -> int:
        return int(self.allowed.shape[0])


def build_mask(history_len: int, candidate_count: int = 0) -> VisibilityMask:
    """Block-causal mask over `history_len` history rows + candidate rows."""
    if history_len < 1:
        raise ValueError(f"build_mask: history_len must be >= 1, got {history_len}")
    if candidate_count < 0:
        raise ValueError(f"build_mask: candidate_count must be >= 0, got {candidate_count}")
    T, C = history_len, candidate_count
    L = T + C
    allowed = np.zeros((L, L), dtype=bool)
    allowed[:T, :T] = np.tril(np.ones((T, T), dtype=bool))
    if C:
        allowed[T:, :T] = True
        idx = np.arange(T, L)
        allowed[idx, idx] = True
    return VisibilityMask(allowed=allowed, history_len=T, candidate_count=C)


def count_mask_edges(mask: VisibilityMask) -> int:
    """Exact number of allowed attention edges."""
    return int(mask.allowed.sum())
