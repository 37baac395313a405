"""
Context - Everything derived once from a split dataset and shared by the
training and evaluation stages: vocabulary, tokenized catalog, layout
builder and title trie.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

try:
    from patchrec.catalog import SplitDataset
    from patchrec.model import ModelConfig, ModelState
    from patchrec.patches import LayoutBuilder
    from patchrec.tokenizer import TitleTrie, Vocabulary, build_trie, build_vocab, tokenize_catalog
    from patchrec.utils import VocabMismatchError, setup_logger
except ImportError:
    from catalog import SplitDataset
    from model import ModelConfig, ModelState
    from patches import LayoutBuilder
    from tokenizer import TitleTrie, Vocabulary, build_trie, build_vocab, tokenize_catalog
    from utils import VocabMismatchError, setup_logger

logger = setup_logger(__name__)


@dataclass
class LabContext:
    dataset: SplitDataset
    vocab: Vocabulary
    title_tokens: Dict[int, Tuple[int, ...]]
    builder: LayoutBuilder = field(init=False)
    trie: TitleTrie = field(init=False)

    def __post_init__(self):
        self.builder = LayoutBuilder(self.vocab, self.title_tokens)
        self.trie = build_trie(self.dataset.items(), self.vocab, self.title_tokens)

    @classmethod
    def from_dataset(cls, dataset: SplitDataset, vocab: Optional[Vocabulary] = None) -> "LabContext":
        vocab = vocab or build_vocab(dataset.items())
        title_tokens = tokenize_catalog(dataset.items(), vocab)
        logger.info(
            f"Context: {len(dataset.catalog)} items, vocabulary {len(vocab)}, "
            f"{len(set(title_tokens.values()))} distinct titles"
        )
        return cls(dataset=dataset, vocab=vocab, title_tokens=title_tokens)

    @property
    def num_items(self) -> int:
        return len(self.dataset.catalog)

    def model_config(self, **overrides) -> ModelConfig:
        """A ModelConfig sized to this vocabulary."""
        return ModelConfig(
            vocab_size=len(self.vocab), vocab_fingerprint=self.vocab.fingerprint(), **overrides
        ).validate()

    def check_compatible(self, state: ModelState) -> None:
        """
        Raises:
            VocabMismatchError: If the state was trained on another vocabulary.
        """
        cfg = state.config
        if cfg.vocab_size != len(self.vocab) or cfg.vocab_fingerprint != self.vocab.fingerprint():
            raise VocabMismatchError(
                f"checkpoint vocabulary (size {cfg.vocab_size}, fingerprint {cfg.vocab_fingerprint[:12] or '-'}) "
                f"does not match the catalog vocabulary (size {len(self.vocab)}, "
                f"fingerprint {self.vocab.fingerprint()[:12]})"
            )
