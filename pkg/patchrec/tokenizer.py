"""
Tokenizer - Word-level vocabulary over item titles and the title prefix tree.

Titles are lowercased and split on whitespace and punctuation. Ids are
assigned by first occurrence after five reserved specials, so the same
catalog always yields the same vocabulary.

The TitleTrie holds every tokenized title followed by EOS; the EOS node of
a title is terminal and stores the ids of every item carrying that title.
"""

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

try:
    from patchrec.catalog import Item
    from patchrec.utils import TokenizerError, TriePrefixError, setup_logger
except ImportError:
    from catalog import Item
    from utils import TokenizerError, TriePrefixError, setup_logger

logger = setup_logger(__name__)

BOS = "[BOS]"
SEP = "[SEP]"
ANS = "[ANS]"
EOS = "[EOS]"
UNK = "[UNK]"
SPECIALS = (BOS, SEP, ANS, EOS, UNK)

_WORD = re.compile(r"[^\W_]+")


def split_words(title: str) -> List[str]:
    return _WORD.findall(title.lower())


class Vocabulary:
    """Bijection between token strings and ids, specials first."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise TokenizerError(f"vocabulary must start with the specials {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise TokenizerError("vocabulary tokens must be unique")
        self.tokens: List[str] = list(tokens)
        self.index: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def ans_id(self) -> int:
        return self.index[ANS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def special_ids(self) -> Set[int]:
        return {self.index[s] for s in SPECIALS}

    def tokenize(self, title: str) -> List[int]:
        """Token ids of a title; unseen words map to UNK."""
        words = split_words(title)
        if not words:
            raise TokenizerError(f"title has no tokens: {title!r}")
        return [self.index.get(w, self.unk_id) for w in words]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def dump(self, path: Path) -> Path:
        """Write the id<TAB>token file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for i, tok in enumerate(self.tokens):
                f.write(f"{i}\t{tok}\n")
        return path

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        tokens: List[str] = []
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f):
                line = line.rstrip("\n")
                if not line:
                    continue
                idx, _, tok = line.partition("\t")
                if int(idx) != len(tokens):
                    raise TokenizerError(f"{path}:{line_no + 1}: expected id {len(tokens)}, got {idx}")
                tokens.append(tok)
        return cls(tokens)


def build_vocab(catalog: Iterable[Item]) -> Vocabulary:
    """Specials, then every title word in order of first occurrence."""
    items = sorted(catalog, key=lambda item: item.item_id)
    if not items:
        raise TokenizerError("cannot build a vocabulary from an empty catalog")
    tokens = list(SPECIALS)
    seen = set(tokens)
    for item in items:
        for word in split_words(item.title):
            if word not in seen:
                seen.add(word)
                tokens.append(word)
    return Vocabulary(tokens)


def tokenize_catalog(catalog: Iterable[Item], vocab: Vocabulary) -> Dict[int, Tuple[int, ...]]:
    """item_id -> title token ids (the tokenized catalog every layout is built from)."""
    return {item.item_id: tuple(vocab.tokenize(item.title)) for item in catalog}


# ============================================================================
# Title trie
# ============================================================================

@dataclass
class TrieNode:
    children: Dict[int, "TrieNode"] = field(default_factory=dict)
    terminal: bool = False
    item_ids: Set[int] = field(default_factory=set)
    min_item_id: Optional[int] = None   # smallest item id at or below this node


class TitleTrie:
    """Token-level prefix tree over every catalog title (+ EOS)."""

    def __init__(self, eos_id: int):
        self.root = TrieNode()
        self.eos_id = eos_id
        self.num_titles = 0
        self.max_depth = 0

    def insert(self, token_ids: Sequence[int], item_id: int) -> None:
        node = self.root
        path = [node]
        for tok in list(token_ids) + [self.eos_id]:
            node = node.children.setdefault(tok, TrieNode())
            path.append(node)
        for visited in path:
            if visited.min_item_id is None or item_id < visited.min_item_id:
                visited.min_item_id = item_id
        if not node.terminal:
            node.terminal = True
            self.num_titles += 1
        node.item_ids.add(item_id)
        self.max_depth = max(self.max_depth, len(token_ids) + 1)

    def _walk(self, prefix: Sequence[int]) -> TrieNode:
        node = self.root
        for depth, tok in enumerate(prefix):
            child = node.children.get(tok)
            if child is None:
                raise TriePrefixError(f"token {tok} at depth {depth} leaves the title trie (prefix {list(prefix)})")
            node = child
        return node

    def allowed_next(self, prefix: Sequence[int]) -> Set[int]:
        """Token ids that keep `prefix` on a title path (EOS when a title ends here)."""
        return set(self._walk(prefix).children)

    def min_item(self, prefix: Sequence[int]) -> int:
        """Smallest item id whose title continues `prefix`."""
        return self._walk(prefix).min_item_id

    def items_for(self, prefix: Sequence[int]) -> Set[int]:
        """Item ids of a finished path (prefix must end with EOS)."""
        node = self._walk(prefix)
        if not node.terminal:
            raise TriePrefixError(f"prefix {list(prefix)} is not a finished title")
        return set(node.item_ids)

    def paths(self) -> List[Tuple[int, ...]]:
        """Every root-to-terminal path, without the trailing EOS."""
        found: List[Tuple[int, ...]] = []
        stack: List[Tuple[TrieNode, Tuple[int, ...]]] = [(self.root, ())]
        while stack:
            node, path = stack.pop()
            if node.terminal:
                found.append(path[:-1])
            for tok, child in node.children.items():
                stack.append((child, path + (tok,)))
        return sorted(found)


def build_trie(catalog: Iterable[Item], vocab: Vocabulary, tokenized: Optional[Dict[int, Tuple[int, ...]]] = None) -> TitleTrie:
    """Insert every catalog title; duplicate titles share one terminal."""
    tokenized = tokenized or tokenize_catalog(catalog, vocab)
    trie = TitleTrie(vocab.eos_id)
    for item_id in sorted(tokenized):
        trie.insert(tokenized[item_id], item_id)
    logger.debug(f"Title trie: {trie.num_titles} distinct titles, max depth {trie.max_depth}")
    return trie
