"""Interpolated Kneser-Ney n-gram language model (single absolute discount)."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .base import LanguageModel, register_model
from .exceptions import InputError
from .vocab import TokenStream, Vocabulary

BOS = -1


@dataclass(frozen=True)
class NgramState:
    owner: str
    history: tuple


@dataclass
class _Context:
    ids: np.ndarray
    counts: np.ndarray
    total: float
    distinct: int


@register_model("ngram")
class KneserNeyLM(LanguageModel):
    """Interpolated Kneser-Ney language model.

    The highest order uses raw n-gram counts, every lower order uses
    continuation counts (number of distinct left extensions), and the
    recursion bottoms out in the uniform distribution over the vocabulary,
    so every id keeps strictly positive probability in every context.
    With ``order=1`` the single level uses continuation counts with the
    stream start counted as a left context.

    Parameters
    ----------
    order : int
        n-gram order, >= 1.
    discount : float
        Absolute discount applied at every level, strictly inside (0, 1).
    cache_size : int
        Number of context distributions memoized during scoring.
    """

    def __init__(self, order=3, discount=0.75, cache_size=4096):
        self.order = order
        self.discount = discount
        self.cache_size = cache_size

    def _validate_params(self):
        if int(self.order) != self.order or self.order < 1:
            raise InputError(f"order must be an integer >= 1, got {self.order!r}")
        if not 0.0 < self.discount < 1.0:
            raise InputError(f"discount must lie strictly inside (0, 1), got {self.discount!r}")

    def fit(self, streams, vocab: Vocabulary):
        self._validate_params()
        streams = [streams] if isinstance(streams, TokenStream) else list(streams)
        if not streams or sum(len(s) for s in streams) == 0:
            raise InputError("training corpus is empty")
        for s in streams:
            s.check_vocab(vocab)
        self.vocab_ = vocab
        order = int(self.order)
        pad = max(order - 1, 1)

        # n-gram types/counts of length order (raw) and order+... for continuation
        top = Counter()
        types = {n: set() for n in range(2, max(order, 2) + 1)}
        for s in streams:
            seq = [BOS] * pad + [int(t) for t in s.ids]
            for i in range(pad, len(seq)):
                if order == 1:
                    top[(seq[i],)] += 1
                else:
                    top[tuple(seq[i - order + 1 : i + 1])] += 1
                for n in types:
                    types[n].add(tuple(seq[i - n + 1 : i + 1]))

        levels = {}
        if order > 1:
            levels[order] = _group(top)
        # continuation counts for levels 1..order-1 (level 1 as well when order == 1)
        for n in range(1, order if order > 1 else 2):
            cont = Counter(g[1:] for g in types[n + 1])
            levels[n] = _group(cont)
        self.levels_ = levels
        self._cache = {}
        return self._finalize()

    # -- probability -------------------------------------------------------
    def _distribution(self, history: tuple) -> np.ndarray:
        cached = self._cache.get(history)
        if cached is not None:
            return cached
        V = len(self.vocab_)
        d = float(self.discount)
        p = np.full(V, 1.0 / V)
        for n in range(1, int(self.order) + 1):
            ctx = history[len(history) - (n - 1) :] if n > 1 else ()
            stats = self.levels_[n].get(ctx)
            if stats is None:
                continue
            p *= d * stats.distinct / stats.total
            p[stats.ids] += (stats.counts - d) / stats.total
        p.setflags(write=False)
        if len(self._cache) >= self.cache_size:
            self._cache.clear()
        self._cache[history] = p
        return p

    def probability(self, history, token) -> float:
        """P(token | history) for a history given as a sequence of ids."""
        h = self._history_key(tuple(int(t) for t in history))
        return float(self._distribution(h)[int(token)])

    def _history_key(self, history):
        n = max(int(self.order) - 1, 0)
        if n == 0:
            return ()
        h = (BOS,) * n + tuple(history)
        return h[len(h) - n :]

    def _initial_state(self):
        return NgramState(self.fingerprint_, self._history_key(()))

    def _advance(self, state, token):
        if self.order == 1:
            return state
        return NgramState(self.fingerprint_, state.history[1:] + (token,))

    def _log_next(self, state):
        return np.log(self._distribution(state.history))

    def next_distribution(self, state):
        self._check_state(state)
        return self._distribution(state.history).copy()

    # -- persistence ---------------------------------------------------------
    def _state_arrays(self):
        arrays = {}
        for n, table in self.levels_.items():
            keys = sorted(table)
            width = n - 1 if n > 1 else 0
            ctx = np.array(keys, dtype=np.int64).reshape(len(keys), width)
            lens = [len(table[k].ids) for k in keys]
            arrays[f"ctx_{n}"] = ctx
            arrays[f"offsets_{n}"] = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
            arrays[f"ids_{n}"] = np.concatenate([table[k].ids for k in keys]).astype(np.int64)
            arrays[f"counts_{n}"] = np.concatenate([table[k].counts for k in keys]).astype(np.int64)
        return {"levels": sorted(self.levels_)}, arrays

    def _restore(self, meta, arrays):
        levels = {}
        for n in meta["levels"]:
            ctx, off = arrays[f"ctx_{n}"], arrays[f"offsets_{n}"]
            ids, counts = arrays[f"ids_{n}"], arrays[f"counts_{n}"]
            table = {}
            for r in range(len(ctx)):
                a, b = off[r], off[r + 1]
                c = counts[a:b].astype(float)
                table[tuple(int(x) for x in ctx[r])] = _Context(ids[a:b].copy(), c, float(c.sum()), b - a)
            levels[int(n)] = table
        self.levels_ = levels
        self._cache = {}


def _group(counter) -> dict:
    """Turn {(ctx..., w): count} into {ctx: _Context}."""
    buckets = defaultdict(list)
    for gram, c in counter.items():
        buckets[gram[:-1]].append((gram[-1], c))
    out = {}
    for ctx, items in buckets.items():
        items.sort()
        ids = np.array([w for w, _ in items], dtype=np.int64)
        counts = np.array([c for _, c in items], dtype=float)
        out[ctx] = _Context(ids, counts, float(counts.sum()), len(items))
    return out


def train_kn(corpus, order: int, discount: float, vocab: Vocabulary) -> KneserNeyLM:
    return KneserNeyLM(order=order, discount=discount).fit(corpus, vocab)


def sample_stream(model: LanguageModel, length: int, seed: int, story_id="sample") -> TokenStream:
    """Draw ``length`` tokens ancestrally from ``model``; reproducible per seed."""
    if length < 1:
        raise InputError("length must be >= 1")
    rng = np.random.default_rng(seed)
    state = model.initial_state()
    out = np.empty(length, dtype=np.int64)
    for i in range(length):
        cdf = np.cumsum(model.next_distribution(state))
        tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        tok = min(tok, len(cdf) - 1)
        out[i] = tok
        state = model.advance(state, tok)
    return TokenStream(out, (0,), story_id, vocab_fingerprint=model.vocab_.fingerprint())
