"""Word-level tokenizer over the synthetic grammar's vocabulary.

Token id 0 is reserved for the null-text placeholder used to embed target
images; id 1 is <unk>. Everything else is a lowercase word.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .backends import GRAMMAR_WORDS
from .errors import InvalidConfig

NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"


@dataclass
class TokenSequence:
    """Token ids for one text; no padding (batching pads later)."""

    ids: list[int]

    def __post_init__(self) -> None:
        if not self.ids:
            raise InvalidConfig("token sequence must contain at least one token")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=lambda: [NULL_TOKEN, UNK_TOKEN])

    def __post_init__(self) -> None:
        if self.tokens[:2] != [NULL_TOKEN, UNK_TOKEN]:
            raise InvalidConfig("vocabulary must start with the null and unk tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise InvalidConfig("vocabulary has duplicate tokens")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def null_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        extra = sorted({w.lower() for w in words} - {NULL_TOKEN, UNK_TOKEN})
        return cls(tokens=[NULL_TOKEN, UNK_TOKEN] + extra)

    def encode(self, text: str, max_len: int = 16) -> TokenSequence:
        """Lowercase whitespace tokenization, truncated to max_len ids."""
        words = text.lower().split()
        if not words:
            raise InvalidConfig("cannot encode empty text")
        ids = [self._index.get(w, self.unk_id) for w in words[:max_len]]
        return TokenSequence(ids=ids)

    def null_sequence(self) -> TokenSequence:
        return TokenSequence(ids=[self.null_id])


def build_vocabulary(attributes: dict[str, list[str]]) -> Vocabulary:
    """Vocabulary covering the oracle grammars over an attribute schema."""
    words = list(GRAMMAR_WORDS) + list(attributes)
    for values in attributes.values():
        words.extend(values)
    return Vocabulary.from_words(words)


def build_vocabulary_from_texts(texts: Iterable[str]) -> Vocabulary:
    """Fallback for collections without an attribute schema."""
    words: set[str] = set()
    for text in texts:
        words.update(text.lower().split())
    return Vocabulary.from_words(words)
