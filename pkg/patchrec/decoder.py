"""
Decoder - Constrained beam search over the title trie.

At every step each live beam may only extend with a token that keeps its
prefix on a catalog title path (EOS included where a title ends). Beams that
emit EOS are finished; the finished titles are ranked by score, expanded to
the items carrying them and truncated to the beam width.

Score: mean per-token log-probability (length_normalize=True) or the plain
sum. Ties are broken by the smallest item id of the title, both when
pruning partial beams and when ranking finished ones.
"""

from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

try:
    from patchrec.autograd import log_softmax_array
    from patchrec.layout_types import PromptLayout
    from patchrec.model import KVCache, ModelState, infer_rows, prompt_rows, token_rows
    from patchrec.tokenizer import TitleTrie
    from patchrec.utils import ConfigError, setup_logger
except ImportError:
    from autograd import log_softmax_array
    from layout_types import PromptLayout
    from model import KVCache, ModelState, infer_rows, prompt_rows, token_rows
    from tokenizer import TitleTrie
    from utils import ConfigError, setup_logger

logger = setup_logger(__name__)

DEFAULT_WIDTH = 20


@dataclass
class Beam:
    prefix: Tuple[int, ...]
    logprob: float
    finished: bool = False
    cache: Optional[KVCache] = field(default=None, repr=False, compare=False)
    next_logits: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def score(self, length_normalize: bool = True) -> float:
        if length_normalize and self.prefix:
            return self.logprob / len(self.prefix)
        return self.logprob


@dataclass
class RankedList:
    """Distinct item ids with non-increasing scores."""
    items: List[int] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)
    titles: List[Tuple[int, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def rank_of(self, item_id: int) -> Optional[int]:
        try:
            return self.items.index(item_id) + 1
        except ValueError:
            return None


def clamp_width(width: int, trie: TitleTrie) -> int:
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    if width > trie.num_titles:
        logger.warning(f"Beam width {width} exceeds the {trie.num_titles} distinct titles; clamped")
        return trie.num_titles
    return width


def beam_search(state: ModelState, layout: PromptLayout, width: int, trie: TitleTrie,
                title_tokens: Mapping[int, Sequence[int]], length_normalize: bool = True) -> RankedList:
    """
    Rank catalog items for one prompt.

    Args:
        state: Model parameters (read only)
        layout: Prompt layout ending in ANS
        width: Beam width, also the length cap of the ranked list
        trie: Title trie of the catalog
        title_tokens: Tokenized catalog used to pool patches

    Returns:
        RankedList of at most `width` items.
    """
    width = clamp_width(width, trie)
    logits, cache = infer_rows(state, prompt_rows(state, layout, title_tokens))
    live = [Beam((), 0.0, cache=cache, next_logits=logits[-1])]
    finished: List[Beam] = []

    while live and len(finished) < width:
        candidates = []
        for beam in live:
            logp = log_softmax_array(beam.next_logits)
            for tok in sorted(trie.allowed_next(beam.prefix)):
                candidates.append(Beam(beam.prefix + (tok,), beam.logprob + float(logp[tok]), cache=beam.cache))
        # equal scores keep the prefix leading to the smaller item id
        candidates.sort(key=lambda b: (-b.score(length_normalize), trie.min_item(b.prefix), b.prefix))

        live = []
        for cand in candidates[:width]:
            if cand.prefix[-1] == trie.eos_id:
                cand.finished = True
                cand.cache = None
                finished.append(cand)
            else:
                step_logits, cand.cache = infer_rows(state, token_rows(state, cand.prefix[-1:]), cand.cache)
                cand.next_logits = step_logits[-1]
                live.append(cand)

    ranked: List[Tuple[float, int, Tuple[int, ...], List[int]]] = []
    for beam in finished:
        items = sorted(trie.items_for(beam.prefix))
        ranked.append((beam.score(length_normalize), items[0], beam.prefix[:-1], items))
    ranked.sort(key=lambda r: (-r[0], r[1]))

    result = RankedList()
    for score, _, title, items in ranked:
        for item_id in items:
            if len(result) >= width:
                return result
            result.items.append(item_id)
            result.scores.append(score)
            result.titles.append(title)
    return result
