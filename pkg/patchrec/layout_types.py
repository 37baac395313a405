"""
Layout Types - Data structures for prompt layouts and compression.

A PromptLayout is the unit the model consumes: an ordered list of segments
(BOS, history entries separated by SEP, ANS) plus the target title tokens
ending in EOS. History entries come in three granularities:

- RAW_TOKENS:    an item's title tokens, one position per token
- ITEM_PATCH:    one item pooled into a single position
- SESSION_PATCH: 1..L adjacent items pooled into a single position
"""

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import List, Optional, Tuple

try:
    from patchrec.utils import LayoutError
except ImportError:
    from utils import LayoutError


class SegmentKind(Enum):
    RAW_TOKENS = "raw"
    ITEM_PATCH = "item_patch"
    SESSION_PATCH = "session_patch"
    SPECIAL = "special"


class LayoutMode(Enum):
    """How a truncated history is laid out."""
    TEXT = "text"                  # every item as title tokens
    PURE_ITEM = "pure_item"        # every item as an item patch
    PURE_SESSION = "pure_session"  # every group of L items as a session patch
    PFT_I = "pft_i"                # item patches, latest M items as text
    PFT_S = "pft_s"                # sessions, then item patches, then latest group as text


@dataclass(frozen=True)
class Segment:
    """
    One run of positions in a layout.

    RAW_TOKENS and SPECIAL carry token_ids; RAW_TOKENS and both patch kinds
    carry the item ids they stand for in source_item_ids.
    """
    kind: SegmentKind
    token_ids: Tuple[int, ...] = ()
    source_item_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind == SegmentKind.ITEM_PATCH and len(self.source_item_ids) != 1:
            raise LayoutError(f"item patch needs exactly one source item, got {self.source_item_ids}")
        if self.kind == SegmentKind.SESSION_PATCH and len(self.source_item_ids) < 1:
            raise LayoutError("session patch needs at least one source item")
        if self.kind == SegmentKind.RAW_TOKENS and (len(self.source_item_ids) != 1 or not self.token_ids):
            raise LayoutError("raw segment needs one source item and at least one token")
        if self.kind == SegmentKind.SPECIAL and len(self.token_ids) != 1:
            raise LayoutError("special segment holds exactly one token")

    @property
    def is_patch(self) -> bool:
        return self.kind in (SegmentKind.ITEM_PATCH, SegmentKind.SESSION_PATCH)

    @property
    def is_history(self) -> bool:
        return self.kind != SegmentKind.SPECIAL

    @property
    def positions(self) -> int:
        return 1 if self.is_patch else len(self.token_ids)


@dataclass(frozen=True)
class PromptLayout:
    segments: Tuple[Segment, ...]
    target_token_ids: Tuple[int, ...]
    target_item_id: Optional[int] = None

    @property
    def positions(self) -> int:
        """Prompt positions (BOS through ANS), excluding the target."""
        return sum(s.positions for s in self.segments)

    @property
    def input_positions(self) -> int:
        """Positions fed to the model in training: prompt plus target minus the final EOS."""
        return self.positions + max(0, len(self.target_token_ids) - 1)

    def history_segments(self) -> List[Segment]:
        return [s for s in self.segments if s.is_history]

    def source_items(self) -> List[int]:
        """Item ids in layout order; equals the truncated history."""
        return [i for s in self.history_segments() for i in s.source_item_ids]

    def count(self, kind: SegmentKind) -> int:
        return sum(1 for s in self.segments if s.kind == kind)


@dataclass
class LayoutConfig:
    """
    k: truncation length
    m: latest items kept as text (PFT-I)
    l: session group size (PFT-S, Pure-Session)
    patch_separators: SEP between two adjacent patches
    """
    k: int = 40
    m: int = 5
    l: int = 5
    mode: LayoutMode = LayoutMode.TEXT
    patch_separators: bool = True

    def validate(self) -> "LayoutConfig":
        if self.k < 1:
            raise LayoutError(f"K must be >= 1, got {self.k}")
        if not 0 <= self.m <= self.k:
            raise LayoutError(f"M must satisfy 0 <= M <= K, got M={self.m} K={self.k}")
        if self.l < 1:
            raise LayoutError(f"L must be >= 1, got {self.l}")
        return self

    def to_dict(self) -> dict:
        return {
            "k": self.k, "m": self.m, "l": self.l,
            "mode": self.mode.value, "patch_separators": self.patch_separators,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LayoutConfig":
        data = dict(data)
        if "mode" in data:
            data["mode"] = LayoutMode(data["mode"])
        return cls(**data).validate()


@dataclass(frozen=True)
class CompressionSchedule:
    """p = step / total_steps, rising linearly from 0 to 1 over training."""
    total_steps: int
    step: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise LayoutError(f"schedule needs total_steps >= 1, got {self.total_steps}")
        if not 0 <= self.step <= self.total_steps:
            raise LayoutError(f"schedule step {self.step} outside [0, {self.total_steps}]")

    @property
    def p_exact(self) -> Fraction:
        return Fraction(self.step, self.total_steps)

    @property
    def p(self) -> float:
        return self.step / self.total_steps

    def at(self, step: int) -> "CompressionSchedule":
        return CompressionSchedule(self.total_steps, step)


@dataclass
class AugmentedBatch:
    """Originals plus their compressed (or dropped) copies."""
    layouts: List[PromptLayout] = field(default_factory=list)
    example_ids: List[int] = field(default_factory=list)
    skipped: int = 0
    selected_items: int = 0
    total_items: int = 0

    @property
    def compressed_fraction(self) -> float:
        return self.selected_items / self.total_items if self.total_items else 0.0
