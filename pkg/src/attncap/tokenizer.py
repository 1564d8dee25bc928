"""Vocabulary, sentence encoding and reason segmentation.

Sentences are lowercase, whitespace-tokenized lists of reasons joined by a
delimiter token, wrapped in start/end markers and padded with placeholders to
a fixed length so the decoder always sees the same sequence shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

SOS = "<SOS>"
EOS = "<EOS>"
DELIM = "<;>"
NULL = "<NULL>"
SPECIAL_TOKENS = (SOS, EOS, DELIM, NULL)

# The six reason classes, in fixed index order.  Indices 0-2 are left-side
# reasons, 3-5 right-side; the action rule in `evaluation` depends on this.
CANONICAL_REASONS = (
    "obstacles on the left lane",
    "no lane on the left",
    "solid line on the left",
    "obstacles on the right lane",
    "no lane on the right",
    "solid line on the right",
)

# Fixed sequence length: total words of the six reasons (30) + 5 delimiters
# + start/end markers.
CANONICAL_T_MAX = sum(len(r.split()) for r in CANONICAL_REASONS) + (len(CANONICAL_REASONS) - 1) + 2

TokenSequence = tuple  # tuple[int, ...] of length T_max


class EmptyCorpus(ValueError):
    pass


class UnknownWord(KeyError):
    pass


class SentenceTooLong(ValueError):
    pass


class InvalidTokenId(IndexError):
    pass


class InvalidTokenSequence(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Dense word<->id bijection with the four specials at ids 0..3."""

    id_to_word: tuple

    def __post_init__(self):
        if self.id_to_word[:4] != SPECIAL_TOKENS:
            raise ValueError("first four vocabulary entries must be the special tokens")
        if len(set(self.id_to_word)) != len(self.id_to_word):
            raise ValueError("vocabulary entries must be distinct")
        object.__setattr__(self, "_word_to_id", {w: i for i, w in enumerate(self.id_to_word)})

    def __len__(self) -> int:
        return len(self.id_to_word)

    @property
    def sos_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def delim_id(self) -> int:
        return 2

    @property
    def null_id(self) -> int:
        return 3

    def id_of(self, word: str) -> int:
        try:
            return self._word_to_id[word]
        except KeyError:
            raise UnknownWord(word) from None

    def word_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_word):
            raise InvalidTokenId(f"token id {token_id} outside vocabulary of {len(self)}")
        return self.id_to_word[token_id]


def build_vocab(corpus: Sequence[str]) -> Vocabulary:
    """Specials first, then distinct lowercase words in first-occurrence order."""
    if not corpus:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    words = list(SPECIAL_TOKENS)
    seen = set(SPECIAL_TOKENS)
    for sentence in corpus:
        for word in sentence.lower().split():
            if word not in seen:
                seen.add(word)
                words.append(word)
    return Vocabulary(tuple(words))


def canonical_vocab() -> Vocabulary:
    return build_vocab(list(CANONICAL_REASONS))


def encode(reasons: Sequence[str], vocab: Vocabulary, t_max: int = CANONICAL_T_MAX) -> TokenSequence:
    """[SOS, reason words..., <;>, ..., EOS, NULL padding] of length t_max."""
    body: list[int] = []
    for k, reason in enumerate(reasons):
        if k > 0:
            body.append(vocab.delim_id)
        body.extend(vocab.id_of(w) for w in reason.lower().split())
    if len(body) + 2 > t_max:
        raise SentenceTooLong(f"{len(body)} body tokens + markers exceed t_max={t_max}")
    ids = [vocab.sos_id] + body + [vocab.eos_id]
    ids.extend([vocab.null_id] * (t_max - len(ids)))
    return tuple(ids)


def decode(seq: Sequence[int], vocab: Vocabulary) -> str:
    """Sentence string with SOS/EOS/NULL dropped; delimiters kept as tokens."""
    return " ".join(body_words(seq, vocab))


def body_words(seq: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Word tokens of a sequence minus the SOS/EOS/NULL markers."""
    drop = {vocab.sos_id, vocab.eos_id, vocab.null_id}
    return [vocab.word_of(i) for i in seq if i not in drop]


def split_reasons(seq: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Reason phrases of a sequence: the body split at delimiters.

    Lenient on malformed model output: empty segments (consecutive or
    dangling delimiters) are dropped.
    """
    segments: list[str] = []
    current: list[str] = []
    for word in body_words(seq, vocab):
        if word == DELIM:
            if current:
                segments.append(" ".join(current))
            current = []
        else:
            current.append(word)
    if current:
        segments.append(" ".join(current))
    return segments


def validate_token_sequence(seq: Sequence[int], vocab: Vocabulary, t_max: int = CANONICAL_T_MAX) -> None:
    """Raise InvalidTokenSequence unless ``seq`` satisfies every invariant."""
    if len(seq) != t_max:
        raise InvalidTokenSequence(f"length {len(seq)} != t_max {t_max}")
    for i in seq:
        if not 0 <= i < len(vocab):
            raise InvalidTokenSequence(f"token id {i} outside vocabulary")
    if seq[0] != vocab.sos_id:
        raise InvalidTokenSequence("sequence must start with SOS")
    eos_positions = [k for k, i in enumerate(seq) if i == vocab.eos_id]
    if len(eos_positions) != 1:
        raise InvalidTokenSequence(f"expected exactly one EOS, found {len(eos_positions)}")
    eos_at = eos_positions[0]
    for k, i in enumerate(seq):
        if k < eos_at and i == vocab.null_id:
            raise InvalidTokenSequence(f"NULL at position {k} before EOS")
        if k > eos_at and i != vocab.null_id:
            raise InvalidTokenSequence(f"non-NULL token at position {k} after EOS")


def save_vocab(vocab: Vocabulary, path) -> None:
    """One token per line; the line number is the id."""
    with open(path, "w", encoding="utf-8") as fh:
        for word in vocab.id_to_word:
            fh.write(word + "\n")


def load_vocab(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        words = [line.rstrip("\n") for line in fh if line.strip()]
    return Vocabulary(tuple(words))
