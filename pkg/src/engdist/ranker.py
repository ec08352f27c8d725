"""Blend learned engagement scores into an existing ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError
from .qrlearn import EngagementModel


@dataclass(frozen=True, slots=True)
class ScoredItem:
    action: int
    base: float
    engagement: float
    combined: float  # base + w * engagement, exactly


def engagement_score(model: EngagementModel, state, action: int) -> float:
    """Expected long-term engagement: the mean of the M quantile outputs."""
    quantiles, _ = model.forward(state, action)
    return float(quantiles.mean())


def rank(state, candidates: Sequence[tuple[int, float]],
         model: EngagementModel, w: float) -> list[ScoredItem]:
    """Order candidates by ``base + w * engagement`` descending.

    Ties break by ascending action id, so output is deterministic.
    """
    if not candidates:
        raise ValidationError("candidates must be non-empty")
    if not math.isfinite(w):
        raise ValidationError(f"w must be finite, got {w!r}")
    seen = set()
    items = []
    for action, base in candidates:
        if action in seen:
            raise ValidationError(f"duplicate candidate action id {action}")
        seen.add(action)
        g = engagement_score(model, state, action)
        items.append(ScoredItem(int(action), float(base), g,
                                float(base) + w * g))
    items.sort(key=lambda it: (-it.combined, it.action))
    return items
