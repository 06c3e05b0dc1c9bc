"""Reading-time corpus ingestion, exclusions, predictors and the sentence split.

Input formats (UTF-8 CSV with a header row):

* words file: ``story_id, sentence_index, word_index, word``
* RT file: ``subject_id, story_id, word_index, rt_ms``

Each story is tokenized word by word and scored as one continuous stream;
a word's ``token_span`` points into that stream.  Words spanning more than
one token (``do·n't``, ``boar·!·'``) stay in the stream for conditioning but
produce no regression rows.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError, IntegrityError, InputError, ParseError
from .vocab import TokenStream, Vocabulary, encode, tokenize_word

WORD_COLUMNS = ("story_id", "sentence_index", "word_index", "word")
RT_COLUMNS = ("subject_id", "story_id", "word_index", "rt_ms")
PREDICTORS = ("word_length", "sentence_position", "unigram_frequency", "surprisal", "successor_surprisal", "entropy")


@dataclass(frozen=True)
class WordRecord:
    story_id: str
    sentence_index: int
    word_index: int
    word: str
    word_length: int
    sentence_position: int
    token_span: tuple
    tokens: tuple = ()

    @property
    def key(self) -> str:
        return f"{self.story_id}:{self.word_index}"

    @property
    def n_tokens(self) -> int:
        return self.token_span[1] - self.token_span[0]


@dataclass(frozen=True)
class RTObservation:
    subject_id: str
    story_id: str
    word_index: int
    rt: float


def _read_csv(path, columns):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file, header row required", line=1)
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise ParseError(f"{path}: header lacks columns {missing}", line=1)
        pos = [header.index(c) for c in columns]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: expected {len(header)} fields, got {len(row)}", line=lineno)
            yield lineno, [row[i] for i in pos]


def _int(value, what, path, line):
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"{path}: {what} {value!r} is not an integer", line=line) from None


def load_words(words_file) -> list[WordRecord]:
    raw = defaultdict(list)
    seen = set()
    for line, (story, sent, idx, word) in _read_csv(words_file, WORD_COLUMNS):
        sent_i = _int(sent, "sentence_index", words_file, line)
        idx_i = _int(idx, "word_index", words_file, line)
        if not word.strip() or any(c.isspace() for c in word):
            raise ParseError(f"{words_file}: word must be one non-empty whitespace-free string", line=line)
        if (story, idx_i) in seen:
            raise IntegrityError(f"{words_file}: line {line}: duplicate word ({story}, {idx_i})")
        seen.add((story, idx_i))
        raw[story].append((idx_i, sent_i, word))

    records = []
    for story, items in raw.items():
        items.sort()
        pos = 0
        sent_pos = Counter()
        prev_sent = None
        for idx, sent, word in items:
            if prev_sent is not None and sent < prev_sent:
                raise IntegrityError(f"{words_file}: story {story} has sentence indices out of order")
            prev_sent = sent
            toks = tuple(tokenize_word(word))
            records.append(
                WordRecord(
                    story_id=story,
                    sentence_index=sent,
                    word_index=idx,
                    word=word,
                    word_length=len(word),
                    sentence_position=sent_pos[sent],
                    token_span=(pos, pos + len(toks)),
                    tokens=toks,
                )
            )
            sent_pos[sent] += 1
            pos += len(toks)
    return records


def load_rts(rt_file, words=None) -> list[RTObservation]:
    keys = {(w.story_id, w.word_index) for w in words} if words is not None else None
    out, seen = [], set()
    for line, (subj, story, idx, rt) in _read_csv(rt_file, RT_COLUMNS):
        idx_i = _int(idx, "word_index", rt_file, line)
        try:
            rt_f = float(rt)
        except ValueError:
            raise ParseError(f"{rt_file}: rt_ms {rt!r} is not a number", line=line) from None
        if not math.isfinite(rt_f) or rt_f <= 0:
            raise ParseError(f"{rt_file}: rt_ms must be a positive finite number, got {rt!r}", line=line)
        if keys is not None and (story, idx_i) not in keys:
            raise IntegrityError(f"{rt_file}: line {line}: RT refers to unknown word ({story}, {idx_i})")
        key = (subj, story, idx_i)
        if key in seen:
            raise IntegrityError(f"{rt_file}: line {line}: duplicate reading time for {key}")
        seen.add(key)
        out.append(RTObservation(subj, story, idx_i, rt_f))
    return out


def load_corpus(words_file, rt_file):
    """Parse and cross-check a words file and an RT file."""
    words = load_words(words_file)
    return words, load_rts(rt_file, words)


def story_tokens(words) -> dict:
    """story_id -> (token strings, sentence-start offsets)."""
    out = {}
    by_story = defaultdict(list)
    for w in words:
        by_story[w.story_id].append(w)
    for story, ws in by_story.items():
        toks, starts, prev = [], [], None
        for w in ws:
            if w.sentence_index != prev:
                starts.append(len(toks))
                prev = w.sentence_index
            toks.extend(w.tokens)
        out[story] = (toks, starts)
    return out


def story_streams(words, vocab: Vocabulary) -> list[TokenStream]:
    return [encode(vocab, toks, story_id=story, boundaries=starts) for story, (toks, starts) in story_tokens(words).items()]


def apply_exclusions(words, vocab: Vocabulary | None = None, exclude_unk=False, story_lengths=None) -> list[WordRecord]:
    """Words eligible for regression rows.

    Drops multi-token words and each story's final word (it has no
    successor).  Words made only of UNK tokens are dropped when
    ``exclude_unk`` is set; see :func:`unk_flags` to inspect them.
    """
    if story_lengths is None:
        story_lengths = {s: len(t) for s, (t, _) in story_tokens(words).items()}
    out = []
    for w in words:
        if w.n_tokens != 1:
            continue
        if w.token_span[1] >= story_lengths[w.story_id]:
            continue
        if exclude_unk and vocab is not None and all(t not in vocab for t in w.tokens):
            continue
        out.append(w)
    return out


def unk_flags(words, vocab: Vocabulary) -> np.ndarray:
    return np.array([all(t not in vocab for t in w.tokens) for w in words], dtype=bool)


def unigram_frequency(freq_corpus, words) -> np.ndarray:
    """Add-one smoothed log relative frequency of each word's surface form.

    ``ln((c + 1) / (N + W))`` with ``N`` the corpus length and ``W`` the size
    of the corpus vocabulary united with the analysis words.
    """
    freq_corpus = list(freq_corpus)
    if not freq_corpus:
        raise InputError("frequency corpus is empty")
    counts = Counter(freq_corpus)
    forms = [w.word if isinstance(w, WordRecord) else str(w) for w in words]
    W = len(set(counts) | set(forms))
    N = len(freq_corpus)
    return np.array([math.log((counts.get(f, 0) + 1) / (N + W)) for f in forms])


def largest_remainder(n: int, fractions) -> list[int]:
    """Split ``n`` items by ``fractions`` with largest-remainder rounding."""
    quotas = [n * f for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


@dataclass
class Partition:
    exploratory: list
    held_out: list
    exploratory_sentences: list
    held_out_sentences: list
    seed: int

    def record(self) -> dict:
        return {
            "seed": self.seed,
            "exploratory_sentences": [list(s) for s in self.exploratory_sentences],
            "held_out_sentences": [list(s) for s in self.held_out_sentences],
        }


def split_sentences(words, fraction_exploratory=1 / 3, seed=0) -> Partition:
    """Random sentence-level split into exploratory and held-out words."""
    if not 0.0 <= fraction_exploratory <= 1.0:
        raise InputError("fraction_exploratory must lie in [0, 1]")
    sentences = sorted({(w.story_id, w.sentence_index) for w in words})
    n_expl, _ = largest_remainder(len(sentences), [fraction_exploratory, 1 - fraction_exploratory])
    perm = np.random.default_rng(seed).permutation(len(sentences))
    expl = sorted(sentences[i] for i in perm[:n_expl])
    held = sorted(sentences[i] for i in perm[n_expl:])
    expl_set = set(expl)
    return Partition(
        exploratory=[w for w in words if (w.story_id, w.sentence_index) in expl_set],
        held_out=[w for w in words if (w.story_id, w.sentence_index) not in expl_set],
        exploratory_sentences=expl,
        held_out_sentences=held,
        seed=seed,
    )


class ZScore(TransformerMixin, BaseEstimator):
    """Column-wise z-transform with the sample (n-1) standard deviation."""

    def __init__(self, columns=None):
        self.columns = columns

    def fit(self, X: pd.DataFrame, y=None):
        cols = list(self.columns) if self.columns is not None else list(X.columns)
        means, sds = {}, {}
        for c in cols:
            v = X[c].to_numpy(dtype=float)
            sd = v.std(ddof=1) if v.size > 1 else 0.0
            if not sd > 0:
                raise ConfigurationError(f"predictor {c!r} has zero variance and cannot be z-transformed")
            means[c], sds[c] = float(v.mean()), float(sd)
        self.means_, self.sds_ = means, sds
        return self

    def transform(self, X: pd.DataFrame) -> pd.DataFrame:
        check_is_fitted(self, "means_")
        out = X.copy()
        for c in self.means_:
            out[c] = (X[c].to_numpy(dtype=float) - self.means_[c]) / self.sds_[c]
        return out


def word_measures(words, scored, entropy_columns=("entropy",)) -> pd.DataFrame:
    """Per-word model measures taken from a token-level scored corpus.

    Surprisal sums over the word's tokens; entropy columns and successor
    surprisal are read at the word's last token.
    """
    by_story = {s.story_id: s for s in scored.streams}
    cache = {}
    rows = []
    for w in words:
        s = by_story.get(w.story_id)
        if s is None:
            raise IntegrityError(f"story {w.story_id!r} missing from the scored corpus")
        a, b = w.token_span
        if b > len(s) or (s.words is not None and tuple(s.words[a:b]) != tuple(w.tokens)):
            raise IntegrityError(f"scored tokens of story {w.story_id!r} do not match word {w.word!r}")
        if w.story_id not in cache:
            cache[w.story_id] = {"succ": s.successor_surprisal, **{c: _measure(s, c) for c in entropy_columns}}
        m = cache[w.story_id]
        row = {
            "story_id": w.story_id,
            "word_index": w.word_index,
            "surprisal": float(s.surprisal[a:b].sum()),
            "successor_surprisal": float(m["succ"][b - 1]),
        }
        for c in entropy_columns:
            row[c] = float(m[c][b - 1])
        rows.append(row)
    return pd.DataFrame(rows)


def _measure(stream, column):
    if column == "entropy":
        return stream.entropy
    if column.startswith("entropy_top"):
        k = int(column[len("entropy_top"):])
        if k not in stream.bounded:
            raise ConfigurationError(f"K={k} was not computed in the scored corpus")
        return stream.bounded[k]
    raise ConfigurationError(f"unknown measure column {column!r}")


def entropy_column(kind) -> str:
    return "entropy" if kind in (None, "total") else f"entropy_top{int(kind)}"


@dataclass
class PredictorTable:
    frame: pd.DataFrame
    means: dict
    sds: dict
    predictors: tuple
    unk_words: list = field(default_factory=list)

    def __len__(self):
        return len(self.frame)

    def to_csv(self, path):
        self.frame.to_csv(path, index=False)
        return path


def build_predictor_table(
    words,
    rts,
    scored,
    entropy_kind="total",
    freq=None,
    rt_range=None,
    extra_entropy=(),
    vocab=None,
) -> PredictorTable:
    """Join reading times with per-word predictors and z-transform them.

    ``words`` are the eligible words (after :func:`apply_exclusions` and any
    partition).  Every returned row is one (subject, word) pair; predictor
    columns hold z-scores and ``raw_<name>`` keeps the untransformed values;
    the ``entropy`` column holds total entropy or, for an integer
    ``entropy_kind``, the best-K entropy.
    ``freq`` maps ``WordRecord.key`` to the unigram log frequency (defaults
    to zero-information frequencies computed from the scored words).
    """
    ecol = entropy_column(entropy_kind)
    extra = tuple(c for c in dict.fromkeys(extra_entropy) if c != ecol)
    measures = word_measures(words, scored, (ecol, *extra)).set_index(["story_id", "word_index"])
    if freq is None:
        freq = dict(zip((w.key for w in words), unigram_frequency([t for w in words for t in w.tokens], words)))
    info = {(w.story_id, w.word_index): w for w in words}
    rows = []
    for r in rts:
        w = info.get((r.story_id, r.word_index))
        if w is None:
            continue
        if rt_range is not None and not rt_range[0] <= r.rt <= rt_range[1]:
            continue
        m = measures.loc[(w.story_id, w.word_index)]
        row = {
            "subject": r.subject_id,
            "story_id": w.story_id,
            "word_index": w.word_index,
            "item": w.key,
            "word": w.word,
            "rt": r.rt,
            "word_length": w.word_length,
            "sentence_position": w.sentence_position,
            "unigram_frequency": freq[w.key],
            "surprisal": m["surprisal"],
            "successor_surprisal": m["successor_surprisal"],
            "entropy": m[ecol],
        }
        for c in extra:
            row[c] = m[c]
        rows.append(row)
    if not rows:
        raise ConfigurationError("no reading times left after joining with eligible words")
    frame = pd.DataFrame(rows)
    predictors = PREDICTORS + extra
    if frame[list(predictors)].isna().any().any():
        raise ConfigurationError("absent predictor values in the joined table")
    for c in predictors:
        frame[f"raw_{c}"] = frame[c].astype(float)
    scaler = ZScore(columns=predictors).fit(frame)
    frame = scaler.transform(frame)
    unk = []
    if vocab is not None:
        unk = [w.key for w in words if all(t not in vocab for t in w.tokens)]
        frame["all_unk"] = frame["item"].isin(set(unk))
    return PredictorTable(frame, scaler.means_, scaler.sds_, predictors, unk)
