"""
Ranking metrics for next-item evaluation (one relevant item per case).

    HR@K   = fraction of cases whose truth is in the top K
    NDCG@K = mean of 1 / log2(rank + 1) over cases with rank <= K (rank is 1-based)
"""

import math
from typing import Optional, Sequence

try:
    from patchrec.utils import ConfigError, DataError
except ImportError:
    from utils import ConfigError, DataError


def _items(ranked) -> Sequence[int]:
    return ranked.items if hasattr(ranked, "items") and not isinstance(ranked, dict) else ranked


def rank_of(ranked, truth: int) -> Optional[int]:
    """1-based rank of truth in a ranked list, None when absent."""
    for index, item in enumerate(_items(ranked)):
        if item == truth:
            return index + 1
    return None


def _check(ranked_lists: Sequence, truths: Sequence[int], k: int) -> None:
    if k <= 0:
        raise ConfigError(f"K must be >= 1, got {k}")
    if len(ranked_lists) != len(truths):
        raise DataError(f"{len(ranked_lists)} ranked lists but {len(truths)} ground truths")


def hit_ratio(ranked_lists: Sequence, truths: Sequence[int], k: int) -> float:
    _check(ranked_lists, truths, k)
    if not truths:
        return 0.0
    hits = 0
    for ranked, truth in zip(ranked_lists, truths):
        rank = rank_of(ranked, truth)
        if rank is not None and rank <= k:
            hits += 1
    return hits / len(truths)


def ndcg(ranked_lists: Sequence, truths: Sequence[int], k: int) -> float:
    _check(ranked_lists, truths, k)
    if not truths:
        return 0.0
    total = 0.0
    for ranked, truth in zip(ranked_lists, truths):
        rank = rank_of(ranked, truth)
        if rank is not None and rank <= k:
            total += 1.0 / math.log2(rank + 1)
    return total / len(truths)


def metrics_from_ranks(ranks: Sequence[Optional[int]], ks: Sequence[int] = (10, 20)) -> dict:
    """HR@K and NDCG@K from precomputed 1-based ranks (None or 0 = miss)."""
    out = {}
    n = len(ranks)
    for k in ks:
        if k <= 0:
            raise ConfigError(f"K must be >= 1, got {k}")
        hits = [r for r in ranks if r and r <= k]
        out[f"hr@{k}"] = len(hits) / n if n else 0.0
        out[f"ndcg@{k}"] = sum(1.0 / math.log2(r + 1) for r in hits) / n if n else 0.0
    return out
