"""Two toy text encoders that split the same caption differently.

Encoder ``A`` is word-level (one token per word). Encoder ``B`` splits each
word into overlapping character bigrams, so ``"circle"`` becomes
``ci ir rc cl le``; single-character words map to one character token.
Both tables reserve id 0 for padding and id 1 for the null (unconditional)
prompt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD_ID = 0
NULL_ID = 1
ENCODERS = ("A", "B")


class TokenizationError(ValueError):
    pass


def bigrams(word: str) -> list[str]:
    if len(word) == 1:
        return [word]
    return [word[k : k + 2] for k in range(len(word) - 1)]


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    # (word, first, last) per word occurrence, inclusive token indices
    spans: tuple[tuple[str, int, int], ...]


@dataclass(frozen=True)
class SubjectSpec:
    """Subject words in caption order with their spans under both encoders."""

    words: tuple[str, ...]
    spans_a: tuple[tuple[int, int], ...]
    spans_b: tuple[tuple[int, int], ...]

    @property
    def n(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class TokenizedPrompt:
    caption: str
    encoder_a_tokens: tuple[int, ...]
    encoder_b_tokens: tuple[int, ...]
    word_spans_a: dict[str, tuple[int, int]] = field(hash=False)
    word_spans_b: dict[str, tuple[int, int]] = field(hash=False)
    subject_words: tuple[str, ...] = ()

    @property
    def boundary(self) -> int:
        """Index splitting the text tokens into encoder-A and encoder-B parts."""
        return len(self.encoder_a_tokens)

    @property
    def num_text_tokens(self) -> int:
        return len(self.encoder_a_tokens) + len(self.encoder_b_tokens)

    @property
    def subject_spec(self) -> SubjectSpec:
        return SubjectSpec(
            words=self.subject_words,
            spans_a=tuple(self.word_spans_a[w] for w in self.subject_words),
            spans_b=tuple(self.word_spans_b[w] for w in self.subject_words),
        )


class Tokenizer:
    """Holds the vocabulary tables of both toy encoders."""

    def __init__(self, words: Iterable[str]):
        words = sorted(set(words))
        for w in words:
            if not w.isalpha() or not w.islower():
                raise TokenizationError(f"vocabulary word {w!r} must be lowercase letters")
            # a two-letter word has one bigram, so both encoders would agree on its length
            if len(w) == 2:
                raise TokenizationError(f"vocabulary word {w!r} has two characters")
        self.words = tuple(words)
        self.table_a = {w: k + 2 for k, w in enumerate(words)}
        pieces = sorted({p for w in words for p in bigrams(w)})
        self.table_b = {p: k + 2 for k, p in enumerate(pieces)}

    @property
    def vocab_a(self) -> int:
        return len(self.table_a) + 2

    @property
    def vocab_b(self) -> int:
        return len(self.table_b) + 2

    def tokenize(self, caption: str, encoder: str) -> TokenSequence:
        if encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {encoder!r}")
        tokens: list[int] = []
        spans = []
        for word in caption.split():
            if word not in self.table_a:
                raise TokenizationError(f"out-of-vocabulary word {word!r}")
            first = len(tokens)
            if encoder == "A":
                tokens.append(self.table_a[word])
            else:
                tokens.extend(self.table_b[p] for p in bigrams(word))
            spans.append((word, first, len(tokens) - 1))
        return TokenSequence(tuple(tokens), tuple(spans))

    def tokenize_prompt(self, caption: str, subjects: Sequence[str]) -> TokenizedPrompt:
        seq_a = self.tokenize(caption, "A")
        seq_b = self.tokenize(caption, "B")
        if len(set(subjects)) != len(subjects):
            raise TokenizationError(f"repeated subject in {list(subjects)}")
        spans_a, spans_b = {}, {}
        for s in subjects:
            hits_a = [(lo, hi) for w, lo, hi in seq_a.spans if w == s]
            hits_b = [(lo, hi) for w, lo, hi in seq_b.spans if w == s]
            if not hits_a:
                raise TokenizationError(f"subject {s!r} does not occur in {caption!r}")
            # first occurrence names the subject
            spans_a[s], spans_b[s] = hits_a[0], hits_b[0]
        return TokenizedPrompt(
            caption=caption,
            encoder_a_tokens=seq_a.tokens,
            encoder_b_tokens=seq_b.tokens,
            word_spans_a=spans_a,
            word_spans_b=spans_b,
            subject_words=tuple(subjects),
        )

    def null_prompt(self) -> TokenizedPrompt:
        return TokenizedPrompt("", (NULL_ID,), (NULL_ID,), {}, {}, ())

    def to_dict(self) -> dict:
        return {"words": list(self.words), "table_a": self.table_a, "table_b": self.table_b}

    @classmethod
    def from_dict(cls, data: dict) -> "Tokenizer":
        tok = cls(data["words"])
        if tok.table_a != data["table_a"] or tok.table_b != data["table_b"]:
            raise TokenizationError("stored tokenizer tables do not match their word list")
        return tok
