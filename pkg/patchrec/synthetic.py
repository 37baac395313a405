"""
Synthetic data - A seeded catalog + interaction log with long-range signal.

Every item belongs to one genre and gets a 2-6 word title drawn from that
genre's vocabulary. Every user has a persistent long-term genre mode; the
mixture used at each step drifts around that mode by drift_rate, and the
next item is drawn from the current mixture (then by in-genre popularity).
Early interactions therefore keep telling the model about the long-term
mode, so longer histories carry real information.
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd
from tqdm import tqdm

try:
    from patchrec.catalog import INTERACTION_COLUMNS, Item
    from patchrec.utils import DataError, setup_logger, write_json
except ImportError:
    from catalog import INTERACTION_COLUMNS, Item
    from utils import DataError, setup_logger, write_json

logger = setup_logger(__name__)

GENERATOR_VERSION = 1
BASE_TIMESTAMP = 1_000_000_000
STEP_SECONDS = 3600
CATALOG_FILE = "catalog.tsv"
INTERACTIONS_FILE = "interactions.tsv"
PROVENANCE_FILE = "provenance.json"

_ONSETS = ["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
           "br", "cr", "dr", "gl", "pl", "st", "tr", "sh", "ch"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ou"]
_CODAS = ["", "n", "r", "s", "l", "th", "nd", "rk"]
_ARTICLES = ["the", "of", "a"]


@dataclass
class SyntheticConfig:
    users: int = 500
    items: int = 200
    interactions_per_user: int = 60
    genres: int = 8
    drift_rate: float = 0.05
    seed: int = 0
    genres_per_user: int = 2
    words_per_genre: int = 24
    min_title_words: int = 2
    max_title_words: int = 6
    popularity_skew: float = 1.0
    article_rate: float = 0.3

    def validate(self) -> None:
        if self.users <= 0 or self.items <= 0 or self.interactions_per_user <= 0:
            raise DataError(
                f"degenerate synthetic config: users={self.users} items={self.items} "
                f"interactions_per_user={self.interactions_per_user}"
            )
        if self.genres < 2:
            raise DataError(f"synthetic config needs genres >= 2, got {self.genres}")
        if not 1 <= self.genres_per_user <= self.genres:
            raise DataError(f"genres_per_user must be in [1, {self.genres}], got {self.genres_per_user}")
        if not 0.0 <= self.drift_rate <= 1.0:
            raise DataError(f"drift_rate must be in [0, 1], got {self.drift_rate}")
        if not 1 <= self.min_title_words <= self.max_title_words <= self.words_per_genre:
            raise DataError("title word bounds must satisfy 1 <= min <= max <= words_per_genre")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        return cls(**data)


@dataclass
class SyntheticData:
    catalog: List[Item]
    interactions: pd.DataFrame
    item_genre: Dict[int, int]
    user_mode: Dict[int, np.ndarray]


def _genre_vocabularies(rng: np.random.Generator, genres: int, size: int) -> List[List[str]]:
    used = set(_ARTICLES)
    vocab: List[List[str]] = []
    for _ in range(genres):
        words: List[str] = []
        while len(words) < size:
            syllables = int(rng.integers(1, 4))
            word = "".join(
                _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                for _ in range(syllables)
            ) + _CODAS[rng.integers(len(_CODAS))]
            if word not in used:
                used.add(word)
                words.append(word)
        vocab.append(words)
    return vocab


def _make_catalog(rng: np.random.Generator, config: SyntheticConfig):
    vocab = _genre_vocabularies(rng, config.genres, config.words_per_genre)
    genre_of = rng.permutation(np.arange(config.items) % config.genres)
    titles_seen = set()
    catalog: List[Item] = []
    item_genre: Dict[int, int] = {}
    for index in range(config.items):
        item_id = index + 1
        genre = int(genre_of[index])
        for _ in range(10):
            n_words = int(rng.integers(config.min_title_words, config.max_title_words + 1))
            words = list(rng.choice(vocab[genre], size=n_words, replace=False))
            if n_words < config.max_title_words and rng.random() < config.article_rate:
                words.insert(0, _ARTICLES[rng.integers(len(_ARTICLES))])
            title = " ".join(w.capitalize() for w in words)
            if title not in titles_seen:
                break
        titles_seen.add(title)
        catalog.append(Item(item_id, title))
        item_genre[item_id] = genre
    return catalog, item_genre


def _popularity(rng: np.random.Generator, size: int, skew: float) -> np.ndarray:
    ranks = rng.permutation(size)
    weights = 1.0 / (ranks + 1.0) ** skew
    return weights / weights.sum()


def generate_synthetic(config: SyntheticConfig) -> SyntheticData:
    """Generate the catalog and interaction log for a seeded config."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    catalog, item_genre = _make_catalog(rng, config)

    genre_items = [
        np.array([i for i, g in item_genre.items() if g == genre], dtype=np.int64)
        for genre in range(config.genres)
    ]
    genre_pop = [_popularity(rng, len(items), config.popularity_skew) for items in genre_items]

    rows = []
    user_mode: Dict[int, np.ndarray] = {}
    span = config.interactions_per_user * STEP_SECONDS
    for user_id in tqdm(range(1, config.users + 1), desc="Generating users", disable=config.users < 50):
        support = rng.choice(config.genres, size=config.genres_per_user, replace=False)
        mode = np.zeros(config.genres)
        mode[support] = rng.dirichlet(np.ones(config.genres_per_user))
        user_mode[user_id] = mode
        mixture = mode.copy()
        timestamp = BASE_TIMESTAMP + int(rng.integers(0, span))
        for _ in range(config.interactions_per_user):
            if config.drift_rate > 0:
                noise = rng.dirichlet(np.full(config.genres, 0.5))
                mixture = (1.0 - config.drift_rate) * mixture + config.drift_rate * (0.5 * mode + 0.5 * noise)
                mixture = mixture / mixture.sum()
            genre = int(rng.choice(config.genres, p=mixture))
            candidates = genre_items[genre]
            if len(candidates) == 0:
                continue
            item_id = int(rng.choice(candidates, p=genre_pop[genre]))
            rating = int(rng.integers(3, 6))
            rows.append((user_id, item_id, rating, timestamp))
            timestamp += int(rng.integers(STEP_SECONDS // 2, STEP_SECONDS * 3 // 2))

    interactions = pd.DataFrame(rows, columns=INTERACTION_COLUMNS).astype("int64")
    logger.info(
        f"Generated {len(catalog)} items, {config.users} users, {len(interactions)} interactions "
        f"(seed={config.seed}, drift={config.drift_rate})"
    )
    return SyntheticData(catalog=catalog, interactions=interactions, item_genre=item_genre, user_mode=user_mode)


def write_synthetic(data: SyntheticData, config: SyntheticConfig, out_dir: Path) -> Dict[str, Path]:
    """Write catalog/interactions TSVs plus the provenance sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    catalog_path = out_dir / CATALOG_FILE
    interactions_path = out_dir / INTERACTIONS_FILE

    with open(catalog_path, "w", encoding="utf-8", newline="\n") as f:
        for item in data.catalog:
            f.write(f"{item.item_id}\t{item.title}\n")
    data.interactions.to_csv(interactions_path, sep="\t", header=False, index=False, lineterminator="\n")

    provenance = write_json(out_dir / PROVENANCE_FILE, {
        "generator": "patchrec.synthetic",
        "generator_version": GENERATOR_VERSION,
        "seed": config.seed,
        "config": config.to_dict(),
        "items": len(data.catalog),
        "interactions": int(len(data.interactions)),
    })
    return {"catalog": catalog_path, "interactions": interactions_path, "provenance": provenance}
