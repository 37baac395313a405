"""
Patches - Build prompt layouts at mixed granularity and account for them.

Layout families:
    text          every history item as title tokens (the uncompressed baseline)
    pft_i         oldest len-M items as item patches, latest M as text
    pft_s         groups of L from the most recent end: latest group text,
                  second-latest group item patches, older groups session patches
    pure_item     pft_i with M = 0
    pure_session  every group a session patch

Pre-training augmentation pairs every text layout with a copy whose items are
independently patched with probability p = step / total_steps. The dropout
ablation uses the same selection mask but removes the selected items.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    from patchrec.layout_types import (
        AugmentedBatch, CompressionSchedule, LayoutConfig, LayoutMode,
        PromptLayout, Segment, SegmentKind,
    )
    from patchrec.tokenizer import Vocabulary
    from patchrec.utils import LayoutError, setup_logger
except ImportError:
    from layout_types import (
        AugmentedBatch, CompressionSchedule, LayoutConfig, LayoutMode,
        PromptLayout, Segment, SegmentKind,
    )
    from tokenizer import Vocabulary
    from utils import LayoutError, setup_logger

logger = setup_logger(__name__)


class LayoutBuilder:
    """Builds layouts from item-id histories over one tokenized catalog."""

    def __init__(self, vocab: Vocabulary, title_tokens: Dict[int, Tuple[int, ...]]):
        self.vocab = vocab
        self.title_tokens = title_tokens
        self._bos = Segment(SegmentKind.SPECIAL, (vocab.bos_id,))
        self._sep = Segment(SegmentKind.SPECIAL, (vocab.sep_id,))
        self._ans = Segment(SegmentKind.SPECIAL, (vocab.ans_id,))

    # Segments ---------------------------------------------------------------

    def tokens_of(self, item_id: int) -> Tuple[int, ...]:
        try:
            return self.title_tokens[item_id]
        except KeyError:
            raise LayoutError(f"item {item_id} is not in the tokenized catalog") from None

    def raw(self, item_id: int) -> Segment:
        return Segment(SegmentKind.RAW_TOKENS, self.tokens_of(item_id), (item_id,))

    def item_patch(self, item_id: int) -> Segment:
        self.tokens_of(item_id)
        return Segment(SegmentKind.ITEM_PATCH, (), (item_id,))

    def session_patch(self, item_ids: Sequence[int]) -> Segment:
        for item_id in item_ids:
            self.tokens_of(item_id)
        return Segment(SegmentKind.SESSION_PATCH, (), tuple(item_ids))

    def target(self, item_id: Optional[int]) -> Tuple[int, ...]:
        if item_id is None:
            return ()
        return self.tokens_of(item_id) + (self.vocab.eos_id,)

    def assemble(self, entries: Sequence[Segment], target_item: Optional[int] = None,
                 patch_separators: bool = True) -> PromptLayout:
        """BOS, entries joined by SEP, ANS; plus the target tokens."""
        if not entries:
            raise LayoutError("cannot lay out an empty history")
        segments = [self._bos]
        for i, entry in enumerate(entries):
            if i > 0 and (patch_separators or not (entries[i - 1].is_patch and entry.is_patch)):
                segments.append(self._sep)
            segments.append(entry)
        segments.append(self._ans)
        return PromptLayout(tuple(segments), self.target(target_item), target_item)

    # Layout families --------------------------------------------------------

    @staticmethod
    def _check(history: Sequence[int], config: LayoutConfig) -> None:
        if not history:
            raise LayoutError("cannot lay out an empty history")
        if len(history) > config.k:
            raise LayoutError(f"history of {len(history)} items exceeds K={config.k}; truncate first")

    def layout_text(self, history: Sequence[int], config: LayoutConfig,
                    target_item: Optional[int] = None) -> PromptLayout:
        self._check(history, config)
        return self.assemble([self.raw(i) for i in history], target_item, config.patch_separators)

    def layout_pft_i(self, history: Sequence[int], config: LayoutConfig,
                     target_item: Optional[int] = None, m: Optional[int] = None) -> PromptLayout:
        self._check(history, config)
        m = config.m if m is None else m
        if m > len(history):
            logger.debug(f"M={m} > history length {len(history)}: text layout")
            return self.layout_text(history, config, target_item)
        split = len(history) - m
        entries = [self.item_patch(i) for i in history[:split]] + [self.raw(i) for i in history[split:]]
        return self.assemble(entries, target_item, config.patch_separators)

    @staticmethod
    def session_groups(history: Sequence[int], l: int) -> List[List[int]]:
        """Groups of exactly l anchored at the most recent end; the oldest may be partial."""
        groups: List[List[int]] = []
        end = len(history)
        while end > 0:
            start = max(0, end - l)
            groups.append(list(history[start:end]))
            end = start
        groups.reverse()
        return groups

    def layout_pft_s(self, history: Sequence[int], config: LayoutConfig,
                     target_item: Optional[int] = None) -> PromptLayout:
        self._check(history, config)
        groups = self.session_groups(history, config.l)
        entries: List[Segment] = []
        for group in groups[:-2]:
            entries.append(self.session_patch(group))
        if len(groups) >= 2:
            entries.extend(self.item_patch(i) for i in groups[-2])
        entries.extend(self.raw(i) for i in groups[-1])
        return self.assemble(entries, target_item, config.patch_separators)

    def layout_pure_item(self, history: Sequence[int], config: LayoutConfig,
                         target_item: Optional[int] = None) -> PromptLayout:
        return self.layout_pft_i(history, config, target_item, m=0)

    def layout_pure_session(self, history: Sequence[int], config: LayoutConfig,
                            target_item: Optional[int] = None) -> PromptLayout:
        self._check(history, config)
        entries = [self.session_patch(g) for g in self.session_groups(history, config.l)]
        return self.assemble(entries, target_item, config.patch_separators)

    def build(self, history: Sequence[int], config: LayoutConfig,
              target_item: Optional[int] = None) -> PromptLayout:
        """Dispatch on config.mode."""
        builders = {
            LayoutMode.TEXT: self.layout_text,
            LayoutMode.PFT_I: self.layout_pft_i,
            LayoutMode.PFT_S: self.layout_pft_s,
            LayoutMode.PURE_ITEM: self.layout_pure_item,
            LayoutMode.PURE_SESSION: self.layout_pure_session,
        }
        return builders[config.mode](history, config, target_item)

    # Masked variants --------------------------------------------------------

    def layout_from_mask(self, history: Sequence[int], mask: Sequence[bool],
                         target_item: Optional[int] = None, patch_separators: bool = True) -> PromptLayout:
        """Items with mask True become item patches, the rest stay text."""
        entries = [self.item_patch(i) if hit else self.raw(i) for i, hit in zip(history, mask)]
        return self.assemble(entries, target_item, patch_separators)

    def layout_without_masked(self, history: Sequence[int], mask: Sequence[bool],
                              target_item: Optional[int] = None,
                              patch_separators: bool = True) -> Optional[PromptLayout]:
        """Items with mask True are removed; None when nothing is left."""
        kept = [i for i, hit in zip(history, mask) if not hit]
        if not kept:
            return None
        return self.assemble([self.raw(i) for i in kept], target_item, patch_separators)


# ============================================================================
# Pre-training augmentation
# ============================================================================

def selection_mask(seed: int, example_id: int, step: int, n_items: int, p: float) -> np.ndarray:
    """Independent Bernoulli(p) draw per item from an RNG keyed on (seed, example, step)."""
    rng = np.random.default_rng([seed, example_id, step])
    return rng.random(n_items) < p


def augment_pretraining(builder: LayoutBuilder, examples: Sequence[Tuple[int, PromptLayout]],
                        schedule: CompressionSchedule, seed: int,
                        patch_separators: bool = True) -> AugmentedBatch:
    """Each original layout followed by a copy whose items are patched with probability p."""
    batch = AugmentedBatch()
    for example_id, layout in examples:
        items = layout.source_items()
        mask = selection_mask(seed, example_id, schedule.step, len(items), schedule.p)
        batch.layouts.append(layout)
        batch.example_ids.append(example_id)
        batch.layouts.append(builder.layout_from_mask(items, mask, layout.target_item_id, patch_separators))
        batch.example_ids.append(example_id)
        batch.selected_items += int(mask.sum())
        batch.total_items += len(items)
    return batch


def augment_dropout(builder: LayoutBuilder, examples: Sequence[Tuple[int, PromptLayout]],
                    schedule: CompressionSchedule, seed: int,
                    patch_separators: bool = True) -> AugmentedBatch:
    """Like augment_pretraining, but the selected items are dropped instead of patched."""
    batch = AugmentedBatch()
    for example_id, layout in examples:
        items = layout.source_items()
        mask = selection_mask(seed, example_id, schedule.step, len(items), schedule.p)
        batch.layouts.append(layout)
        batch.example_ids.append(example_id)
        dropped = builder.layout_without_masked(items, mask, layout.target_item_id, patch_separators)
        if dropped is None:
            batch.skipped += 1
        else:
            batch.layouts.append(dropped)
            batch.example_ids.append(example_id)
        batch.selected_items += int(mask.sum())
        batch.total_items += len(items)
    if batch.skipped:
        logger.info(f"Dropout emptied {batch.skipped} histories at step {schedule.step}; copies skipped")
    return batch


# ============================================================================
# Accounting
# ============================================================================

def history_units(layout: PromptLayout) -> int:
    """Item-representation positions of the history: title tokens plus one per patch (no SEP/BOS/ANS)."""
    return sum(s.positions for s in layout.history_segments())


def compression_ratio(text_layout: PromptLayout, compressed_layout: PromptLayout) -> float:
    """History tokens before compression / history positions after compression."""
    if text_layout.source_items() != compressed_layout.source_items():
        raise LayoutError("compression_ratio needs two layouts of the same history")
    return history_units(text_layout) / history_units(compressed_layout)


def uncompressed_units(builder: LayoutBuilder, layout: PromptLayout) -> int:
    """Title tokens the layout's history would take as plain text."""
    return sum(len(builder.tokens_of(i)) for i in layout.source_items())


# ============================================================================
# Debug rendering
# ============================================================================

def render_layout(layout: PromptLayout, vocab: Optional[Vocabulary] = None) -> str:
    """One line per segment, then the target; used by golden-file tests."""

    def words(ids: Sequence[int]) -> str:
        if vocab is None:
            return " ".join(str(i) for i in ids)
        return " ".join(f'"{vocab.tokens[i]}"' for i in ids)

    lines = []
    for seg in layout.segments:
        if seg.kind == SegmentKind.SPECIAL:
            tok = seg.token_ids[0]
            lines.append(vocab.tokens[tok].strip("[]") if vocab else f"SPECIAL({tok})")
        elif seg.kind == SegmentKind.RAW_TOKENS:
            lines.append(f"RAW({words(seg.token_ids)})")
        elif seg.kind == SegmentKind.ITEM_PATCH:
            lines.append(f"ITEMPATCH(item={seg.source_item_ids[0]})")
        else:
            lines.append(f"SESSIONPATCH(items={','.join(str(i) for i in seg.source_item_ids)})")
    if layout.target_token_ids:
        lines.append(f"TARGET({words(layout.target_token_ids)})")
    return "\n".join(lines)
