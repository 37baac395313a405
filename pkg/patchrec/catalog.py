"""
Catalog - Item catalog and interaction-log management.

Reads MovieLens-convention TSV files, applies the rating / user / item
filters, splits the log temporally (global timestamp ranks, 48:1:1 by
default) and serves truncated per-user histories.

File formats:
    catalog:      item_id<TAB>title
    interactions: user_id<TAB>item_id<TAB>rating<TAB>timestamp
"""

import csv
from bisect import bisect_left
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

try:
    from patchrec.utils import DataError, EmptyHistoryError, setup_logger, require_positive
except ImportError:
    from utils import DataError, EmptyHistoryError, setup_logger, require_positive

logger = setup_logger(__name__)

# Configuration
SPLIT_RATIO = (48, 1, 1)
CATALOG_COLUMNS = ["item_id", "title"]
INTERACTION_COLUMNS = ["user_id", "item_id", "rating", "timestamp"]


@dataclass(frozen=True)
class Item:
    item_id: int
    title: str


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: int
    timestamp: int
    order: int = 0  # position in the source file, breaks timestamp ties


@dataclass
class FilterConfig:
    """Ingestion filters. Users need at least min_user_interactions rows to stay."""
    min_rating: int = 0
    min_user_interactions: int = 1
    min_item_users: int = 1
    split_ratio: Tuple[int, int, int] = SPLIT_RATIO

    def to_dict(self) -> dict:
        data = asdict(self)
        data["split_ratio"] = list(self.split_ratio)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "FilterConfig":
        data = dict(data)
        if "split_ratio" in data:
            data["split_ratio"] = tuple(int(x) for x in data["split_ratio"])
        return cls(**data)


@dataclass
class SplitDataset:
    """Filtered catalog, temporal split and per-user chronological index."""
    catalog: Dict[int, Item]
    train: List[Interaction]
    validation: List[Interaction]
    test: List[Interaction]
    user_index: Dict[int, List[Interaction]] = field(default_factory=dict)
    _user_times: Dict[int, List[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._user_times:
            self._user_times = {
                user: [x.timestamp for x in rows] for user, rows in self.user_index.items()
            }

    def split(self, name: str) -> List[Interaction]:
        if name not in ("train", "validation", "test"):
            raise DataError(f"unknown split '{name}'")
        return getattr(self, name)

    def prior_count(self, user_id: int, anchor_timestamp: int) -> int:
        """Number of interactions the user made strictly before the anchor."""
        times = self._user_times.get(user_id)
        if times is None:
            return 0
        return bisect_left(times, anchor_timestamp)

    def truncate_history(self, user_id: int, anchor_timestamp: int, k: int) -> List[int]:
        """
        The at-most-k most recent items strictly before anchor_timestamp, oldest first.

        Raises:
            EmptyHistoryError: If the user has no earlier interaction
        """
        require_positive(k, "K")
        count = self.prior_count(user_id, anchor_timestamp)
        if count == 0:
            raise EmptyHistoryError(
                f"user {user_id} has no interaction before timestamp {anchor_timestamp}"
            )
        rows = self.user_index[user_id]
        return [x.item_id for x in rows[max(0, count - k):count]]

    def items(self) -> List[Item]:
        return [self.catalog[i] for i in sorted(self.catalog)]

    @property
    def num_interactions(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)


# ============================================================================
# Loading
# ============================================================================

def load_catalog(path: Path) -> Dict[int, Item]:
    """Load the item_id/title TSV."""
    df = pd.read_csv(
        path, sep="\t", header=None, names=CATALOG_COLUMNS,
        dtype={"item_id": "int64", "title": str},
        quoting=csv.QUOTE_NONE, keep_default_na=False,
    )
    duplicated = df["item_id"][df["item_id"].duplicated()].unique().tolist()
    if duplicated:
        raise DataError(f"duplicate item ids in catalog: {sorted(duplicated)[:20]}")
    empty = df["item_id"][df["title"].str.strip() == ""].tolist()
    if empty:
        raise DataError(f"empty titles for item ids: {sorted(empty)[:20]}")
    return {int(r.item_id): Item(int(r.item_id), str(r.title)) for r in df.itertuples(index=False)}


def load_interactions(path: Path) -> pd.DataFrame:
    """Load the interaction TSV, keeping file order in an 'order' column."""
    df = pd.read_csv(path, sep="\t", header=None, names=INTERACTION_COLUMNS, dtype="int64")
    df["order"] = range(len(df))
    return df


# ============================================================================
# Filtering and splitting
# ============================================================================

def _filter_users(df: pd.DataFrame, min_count: int) -> pd.DataFrame:
    counts = df.groupby("user_id")["item_id"].transform("size")
    return df[counts >= min_count]


def _filter_items(df: pd.DataFrame, min_users: int) -> pd.DataFrame:
    users = df.groupby("item_id")["user_id"].transform("nunique")
    return df[users >= min_users]


def apply_filters(df: pd.DataFrame, config: FilterConfig) -> pd.DataFrame:
    """Rating filter, user filter, item filter, then one user re-check."""
    before = len(df)
    df = df[df["rating"] >= config.min_rating]
    logger.info(f"Rating filter (>= {config.min_rating}): {before} -> {len(df)} interactions")
    df = _filter_users(df, config.min_user_interactions)
    df = _filter_items(df, config.min_item_users)
    df = _filter_users(df, config.min_user_interactions)
    logger.info(
        f"User/item filters: {df['user_id'].nunique()} users, {df['item_id'].nunique()} items, "
        f"{len(df)} interactions"
    )
    return df


def _to_interactions(df: pd.DataFrame) -> List[Interaction]:
    return [
        Interaction(int(r.user_id), int(r.item_id), int(r.rating), int(r.timestamp), int(r.order))
        for r in df.itertuples(index=False)
    ]


def temporal_split(df: pd.DataFrame, ratio: Sequence[int] = SPLIT_RATIO) -> Tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """
    Split on global timestamp ranks: the first ratio[0]/sum share of the
    chronologically ordered log is train, the next ratio[1]/sum validation,
    the rest test.
    """
    if len(ratio) != 3 or any(r < 0 for r in ratio) or sum(ratio) == 0:
        raise DataError(f"invalid split ratio {list(ratio)}")
    ordered = df.sort_values(["timestamp", "order"], kind="mergesort")
    n = len(ordered)
    total = sum(ratio)
    cut_train = n * ratio[0] // total
    cut_valid = n * (ratio[0] + ratio[1]) // total
    return ordered.iloc[:cut_train], ordered.iloc[cut_train:cut_valid], ordered.iloc[cut_valid:]


def build_split(catalog: Dict[int, Item], interactions: pd.DataFrame, config: FilterConfig) -> SplitDataset:
    """Validate, filter and split an in-memory log."""
    if "order" not in interactions.columns:
        interactions = interactions.assign(order=range(len(interactions)))
    unknown = sorted(set(interactions["item_id"].unique().tolist()) - set(catalog))
    if unknown:
        shown = ", ".join(str(x) for x in unknown[:20])
        more = f" (+{len(unknown) - 20} more)" if len(unknown) > 20 else ""
        raise DataError(f"interactions reference {len(unknown)} unknown item ids: {shown}{more}")

    df = apply_filters(interactions, config)
    if df.empty:
        raise DataError("no interactions left after filtering")

    train_df, valid_df, test_df = temporal_split(df, config.split_ratio)

    user_index: Dict[int, List[Interaction]] = {}
    for user_id, rows in df.sort_values(["timestamp", "order"], kind="mergesort").groupby("user_id", sort=True):
        user_index[int(user_id)] = _to_interactions(rows)

    kept_items = set(int(i) for i in df["item_id"].unique())
    return SplitDataset(
        catalog={i: catalog[i] for i in sorted(kept_items)},
        train=_to_interactions(train_df),
        validation=_to_interactions(valid_df),
        test=_to_interactions(test_df),
        user_index=user_index,
    )


def ingest(catalog_path: Path, interactions_path: Path, filter_config: FilterConfig) -> SplitDataset:
    """Load both TSV files and produce the split dataset."""
    catalog_path, interactions_path = Path(catalog_path), Path(interactions_path)
    for path in (catalog_path, interactions_path):
        if not path.exists():
            raise DataError(f"input file not found: {path}")
    catalog = load_catalog(catalog_path)
    interactions = load_interactions(interactions_path)
    logger.info(f"Loaded {len(catalog)} items and {len(interactions)} interactions")
    dataset = build_split(catalog, interactions, filter_config)
    logger.info(
        f"Split: train={len(dataset.train)} validation={len(dataset.validation)} test={len(dataset.test)}"
    )
    return dataset


# ============================================================================
# Statistics and the counting oracle
# ============================================================================

def dataset_stats(dataset: SplitDataset, title_token_counts: Optional[Dict[int, int]] = None) -> dict:
    """Summary counts: users, items, interactions, sequence and title lengths."""
    users = len(dataset.user_index)
    interactions = sum(len(rows) for rows in dataset.user_index.values())
    stats = {
        "users": users,
        "items": len(dataset.catalog),
        "interactions": interactions,
        "avg_items_per_user": interactions / users if users else 0.0,
        "train": len(dataset.train),
        "validation": len(dataset.validation),
        "test": len(dataset.test),
    }
    if title_token_counts is not None:
        counts = [title_token_counts[i] for i in dataset.catalog]
        stats["avg_title_tokens"] = sum(counts) / len(counts) if counts else 0.0
    return stats


def frequency_predictor(history: Sequence[int], k: int) -> List[int]:
    """Rank items by how often they occur in the history; ties go to the most recent."""
    counts = Counter(history)
    last_seen = {item: pos for pos, item in enumerate(history)}
    ranked = sorted(counts, key=lambda item: (-counts[item], -last_seen[item]))
    return ranked[:k]
