"""Vocabulary, tokenization and integer-coded token streams."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InputError

UNK = "<unk>"

_CLITICS = ("n't", "'s", "'re", "'ve", "'ll", "'d", "'m")
_PUNCT = set("!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~“”‘’«»…—–")
SENTENCE_FINAL = {".", "!", "?"}


def _split_clitic(word):
    lower = word.lower()
    for clitic in _CLITICS:
        if lower.endswith(clitic) and len(word) > len(clitic):
            return [word[: -len(clitic)], word[-len(clitic):]]
    return [word]


def tokenize_word(word: str) -> list[str]:
    """Split one whitespace-delimited word into model tokens.

    Leading and trailing punctuation characters become separate tokens and a
    trailing clitic (n't, 's, ...) is split off, so ``"don't"`` gives
    ``["do", "n't"]`` and ``"boar!'"`` gives ``["boar", "!", "'"]``.
    """
    if not word:
        return []
    i, j = 0, len(word)
    while i < j and word[i] in _PUNCT:
        i += 1
    while j > i and word[j - 1] in _PUNCT:
        j -= 1
    core = word[i:j]
    if not core:
        return list(word)
    return list(word[:i]) + _split_clitic(core) + list(word[j:])


def tokenize(text: str) -> list[str]:
    """Whitespace split followed by :func:`tokenize_word` on every chunk."""
    out = []
    for chunk in text.split():
        out.extend(tokenize_word(chunk))
    return out


def sentence_starts(tokens: Sequence[str]) -> list[int]:
    """Offsets at which sentences begin, judged by sentence-final punctuation."""
    starts = [0] if tokens else []
    for i, tok in enumerate(tokens[:-1]):
        nxt = tokens[i + 1]
        if tok in SENTENCE_FINAL and nxt not in SENTENCE_FINAL and nxt not in {"'", '"', ")", "”", "’"}:
            starts.append(i + 1)
        elif tok in {"'", '"', ")", "”", "’"} and i > 0 and tokens[i - 1] in SENTENCE_FINAL:
            if nxt not in _PUNCT:
                starts.append(i + 1)
    return starts


@dataclass(frozen=True)
class Vocabulary:
    """Dense word <-> id mapping with a reserved UNK entry at id 0."""

    entries: tuple[str, ...]
    index: dict = field(compare=False, repr=False)
    unk_id: int = 0

    @classmethod
    def from_entries(cls, entries: Iterable[str]) -> "Vocabulary":
        entries = tuple(entries)
        if not entries or entries[0] != UNK:
            raise InputError("vocabulary entries must start with the UNK symbol")
        if len(entries) < 2:
            raise InputError("vocabulary needs UNK plus at least one word")
        index = {w: i for i, w in enumerate(entries)}
        if len(index) != len(entries):
            raise InputError("duplicate vocabulary entries")
        return cls(entries=entries, index=index, unk_id=0)

    def __len__(self):
        return len(self.entries)

    @property
    def size(self) -> int:
        return len(self.entries)

    def __contains__(self, word):
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    def word(self, idx: int) -> str:
        return self.entries[idx]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.entries[i] for i in ids]

    def fingerprint(self) -> str:
        h = hashlib.sha256("\x1f".join(self.entries).encode("utf-8"))
        return h.hexdigest()[:16]


def build_vocabulary(corpus: Sequence[str], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 1`` most frequent strings; the rest map to UNK.

    Ties in frequency go to the string seen first in ``corpus``.
    """
    if max_size < 2:
        raise InputError(f"max_size must be >= 2, got {max_size}")
    if len(corpus) == 0:
        raise InputError("cannot build a vocabulary from an empty corpus")
    counts = Counter(corpus)
    first_seen = {}
    for i, w in enumerate(corpus):
        first_seen.setdefault(w, i)
    counts.pop(UNK, None)
    ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
    return Vocabulary.from_entries((UNK, *ranked[: max_size - 1]))


@dataclass(frozen=True)
class TokenStream:
    """Integer-coded text of one story.

    ``boundaries`` holds sentence-start offsets; ``words`` optionally keeps
    the surface token strings (before UNK mapping) for reporting.
    """

    ids: np.ndarray
    boundaries: tuple[int, ...] = (0,)
    story_id: str = ""
    words: tuple[str, ...] | None = None
    vocab_fingerprint: str | None = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        b = tuple(int(x) for x in self.boundaries)
        if len(ids) == 0:
            b = ()
        elif not b or b[0] != 0 or any(y <= x for x, y in zip(b, b[1:])) or b[-1] >= len(ids):
            raise InputError(f"invalid sentence boundaries {b!r} for stream of length {len(ids)}")
        object.__setattr__(self, "boundaries", b)
        if self.words is not None and len(self.words) != len(ids):
            raise InputError("words and ids differ in length")
        if len(ids) and ids.min() < 0:
            raise InputError("negative token id")

    def __len__(self):
        return len(self.ids)

    def check_vocab(self, vocab: Vocabulary):
        if self.vocab_fingerprint is not None and self.vocab_fingerprint != vocab.fingerprint():
            raise InputError(f"stream {self.story_id!r} was encoded with a different vocabulary")
        if len(self.ids) and self.ids.max() >= len(vocab):
            raise InputError(
                f"stream {self.story_id!r} has id {int(self.ids.max())} >= vocabulary size {len(vocab)}"
            )


def encode(vocab: Vocabulary, words: Sequence[str], story_id: str = "", boundaries=None) -> TokenStream:
    """Map strings to ids; unknown strings become ``vocab.unk_id``."""
    ids = np.fromiter((vocab.id(w) for w in words), dtype=np.int64, count=len(words))
    if boundaries is None:
        boundaries = sentence_starts(list(words))
    return TokenStream(
        ids=ids,
        boundaries=tuple(boundaries),
        story_id=story_id,
        words=tuple(words),
        vocab_fingerprint=vocab.fingerprint(),
    )


def encode_text(vocab: Vocabulary, text: str, story_id: str = "") -> TokenStream:
    return encode(vocab, tokenize(text), story_id=story_id)
