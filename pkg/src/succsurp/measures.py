"""Surprisal, successor surprisal, entropy and best-K entropy.

All quantities are in nats.  A scored corpus holds one record per token:
the surprisal of the token given its left context, and the entropy (total
and best-K) of the distribution over the *next* token, i.e. the one reached
after consuming the token.  Successor surprisal at position t is simply the
surprisal at t+1.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
from scipy.special import entr
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InputError, UndefinedCorrelationError
from .vocab import TokenStream

P_MIN = 1e-12
DEFAULT_K = (5, 50, 500, 5000)


def _as_dist(dist):
    p = np.asarray(dist, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise InputError("distribution must be a non-empty vector")
    return p


def surprisal(dist, token: int, p_min: float = P_MIN) -> float:
    """-ln P(token), with the probability floored at ``p_min``."""
    p = _as_dist(dist)
    if not 0 <= token < p.size:
        raise InputError(f"token {token} outside distribution of size {p.size}")
    return -math.log(max(float(p[token]), p_min))


def entropy(dist) -> float:
    """-sum p ln p with 0 ln 0 taken as 0."""
    return float(entr(_as_dist(dist)).sum())


def top_k_indices(dist, k: int) -> np.ndarray:
    """Ids of the ``k`` most probable entries, ties broken toward lower ids."""
    p = _as_dist(dist)
    _check_k(k, p.size)
    # stable sort on -p keeps lower ids first among equal probabilities
    return np.sort(np.argsort(-p, kind="stable")[:k])


def bounded_entropy(dist, k: int, renormalize: bool = False) -> float:
    """Entropy restricted to the ``k`` most probable continuations.

    By default the truncated terms use the original probabilities, so the
    value is non-decreasing in ``k`` and equals :func:`entropy` at
    ``k = |V|``.  ``renormalize=True`` rescales the kept mass to 1 first.
    """
    p = _as_dist(dist)
    _check_k(k, p.size)
    if renormalize:
        kept = p[top_k_indices(p, k)]
        return float(entr(kept / kept.sum()).sum())
    return float(_truncated_entropies(p, [k])[0])


def _check_k(k, size):
    if int(k) != k or not 1 <= k <= size:
        raise InputError(f"K must be an integer in [1, {size}], got {k!r}")


def _truncated_entropies(p: np.ndarray, ks: Sequence[int]) -> np.ndarray:
    """Best-K entropies for several K with one O(|V|) partition.

    After partitioning -p at positions K-1 the first K slots hold a top-K
    multiset; equal probabilities contribute equal terms, so which tied id
    is kept does not change the sum.
    """
    ks = sorted(set(int(k) for k in ks))
    V = p.size
    kth = [k - 1 for k in ks if k < V]
    part = -np.partition(-p, kth) if kth else p
    csum = np.cumsum(entr(part))
    out = {k: csum[k - 1] for k in ks}
    if V in out:
        # same summation as entropy() so K = |V| reproduces it bit for bit
        out[V] = entr(p).sum()
    return np.array([out[int(k)] for k in ks])


@dataclass(frozen=True)
class TokenMeasures:
    position: int
    token: int
    surprisal: float
    successor_surprisal: float | None
    entropy: float
    bounded_entropy: dict


@dataclass
class StreamMeasures:
    """Per-position measures of one stream, stored column-wise."""

    story_id: str
    tokens: np.ndarray
    surprisal: np.ndarray
    entropy: np.ndarray
    bounded: dict = field(default_factory=dict)
    words: tuple | None = None

    @property
    def successor_surprisal(self) -> np.ndarray:
        """Surprisal shifted left by one; NaN marks the absent final value."""
        out = np.full(len(self.surprisal), np.nan)
        out[:-1] = self.surprisal[1:]
        return out

    def __len__(self):
        return len(self.tokens)

    def records(self) -> Iterator[TokenMeasures]:
        succ = self.successor_surprisal
        for t in range(len(self.tokens)):
            yield TokenMeasures(
                position=t,
                token=int(self.tokens[t]),
                surprisal=float(self.surprisal[t]),
                successor_surprisal=None if np.isnan(succ[t]) else float(succ[t]),
                entropy=float(self.entropy[t]),
                bounded_entropy={k: float(v[t]) for k, v in self.bounded.items()},
            )


@dataclass
class ScoredCorpus:
    streams: list
    model_fingerprint: str
    vocab_size: int
    k_list: tuple = ()

    def __iter__(self):
        return iter(self.streams)

    def __len__(self):
        return sum(len(s) for s in self.streams)

    def column(self, name: str) -> np.ndarray:
        """Concatenate one measure over all streams (NaN for absent values)."""
        parts = []
        for s in self.streams:
            if name == "successor_surprisal":
                parts.append(s.successor_surprisal)
            elif name.startswith("entropy_top"):
                parts.append(s.bounded[int(name[len("entropy_top"):])])
            else:
                parts.append(getattr(s, name))
        return np.concatenate(parts) if parts else np.empty(0)

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for s in self.streams:
            cols = {
                "story_id": s.story_id,
                "position": np.arange(len(s)),
                "word": list(s.words) if s.words is not None else [""] * len(s),
                "surprisal": s.surprisal,
                "successor_surprisal": s.successor_surprisal,
                "entropy": s.entropy,
            }
            for k in self.k_list:
                cols[f"entropy_top{k}"] = s.bounded[k]
            frames.append(pd.DataFrame(cols))
        if not frames:
            return pd.DataFrame(columns=["story_id", "position", "word", "surprisal", "successor_surprisal", "entropy"])
        return pd.concat(frames, ignore_index=True)

    def to_csv(self, path, log_base=None):
        """One row per token; absent successor surprisal is an empty field."""
        df = self.to_frame()
        if log_base is not None:
            num = [c for c in df.columns if c not in ("story_id", "position", "word")]
            df[num] = df[num] / math.log(log_base)
        df.to_csv(path, index=False, na_rep="")
        return path

    @classmethod
    def from_csv(cls, path, model_fingerprint="", vocab_size=0) -> "ScoredCorpus":
        df = pd.read_csv(path, dtype={"story_id": str, "word": str}, keep_default_na=False, na_values={"successor_surprisal": [""]}, float_precision="round_trip")
        required = ["story_id", "position", "word", "surprisal", "successor_surprisal", "entropy"]
        missing = [c for c in required if c not in df.columns]
        if missing:
            raise InputError(f"{path}: scored corpus lacks columns {missing}")
        ks = tuple(int(c[len("entropy_top"):]) for c in df.columns if c.startswith("entropy_top"))
        streams = []
        for sid, g in df.groupby("story_id", sort=False):
            g = g.sort_values("position")
            streams.append(
                StreamMeasures(
                    story_id=str(sid),
                    tokens=np.full(len(g), -1),
                    surprisal=g["surprisal"].to_numpy(float),
                    entropy=g["entropy"].to_numpy(float),
                    bounded={k: g[f"entropy_top{k}"].to_numpy(float) for k in ks},
                    words=tuple(g["word"]),
                )
            )
        return cls(streams, model_fingerprint, vocab_size, ks)


def score_stream(model, stream: TokenStream, k_list=(), p_min=P_MIN) -> StreamMeasures:
    stream.check_vocab(model.vocab_)
    n = len(stream)
    surp = np.empty(n)
    ent = np.empty(n)
    ks = sorted(set(int(k) for k in k_list))
    for k in ks:
        _check_k(k, model.vocab_size)
    bnd = np.empty((len(ks), n))
    log_floor = math.log(p_min)
    state = model.initial_state()
    logp = model.log_next_distribution(state)
    for t, tok in enumerate(stream.ids):
        surp[t] = -max(float(logp[tok]), log_floor)
        state = model.advance(state, tok)
        logp = model.log_next_distribution(state)
        p = np.exp(logp)
        ent[t] = entr(p).sum()
        if ks:
            bnd[:, t] = _truncated_entropies(p, ks)
    return StreamMeasures(
        story_id=stream.story_id,
        tokens=np.asarray(stream.ids).copy(),
        surprisal=surp,
        entropy=ent,
        bounded={k: bnd[i] for i, k in enumerate(ks)},
        words=stream.words,
    )


def score_corpus(model, streams, k_list=(), n_jobs=1) -> ScoredCorpus:
    """Score every stream with ``model``.

    Streams are independent (each starts from the model's initial state), so
    ``n_jobs > 1`` scores them on a thread pool.
    """
    streams = [streams] if isinstance(streams, TokenStream) else list(streams)
    ks = tuple(sorted(set(int(k) for k in k_list)))
    if n_jobs == 1:
        scored = [score_stream(model, s, ks) for s in streams]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            scored = list(pool.map(lambda s: score_stream(model, s, ks), streams))
    return ScoredCorpus(scored, model.fingerprint_, model.vocab_size, ks)


def corpus_entropy_estimate(scored) -> float:
    """Mean successor surprisal: the Monte Carlo estimate of corpus entropy."""
    vals = scored.column("successor_surprisal") if isinstance(scored, ScoredCorpus) else np.asarray(scored, float)
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise InputError("no successor-surprisal values to average")
    return float(vals.mean())


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("pearson_r needs two 1-d sequences of equal length")
    if x.size < 2:
        raise InputError("pearson_r needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for a zero-variance series")
    r = (dx @ dy) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def paired(scored: ScoredCorpus, a: str, b: str):
    """Two measure columns restricted to positions where both are present."""
    x, y = scored.column(a), scored.column(b)
    keep = ~(np.isnan(x) | np.isnan(y))
    return x[keep], y[keep]


def write_scatter(scored: ScoredCorpus, path, x="successor_surprisal", y="entropy") -> float:
    """Write the (x, y) scatter source and return their Pearson r."""
    xs, ys = paired(scored, x, y)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([x, y])
        w.writerows(zip(map(repr, xs.tolist()), map(repr, ys.tolist())))
    return pearson_r(xs, ys)


class InformationMeasures(TransformerMixin, BaseEstimator):
    """Transformer front end: token streams in, per-token measure table out.

    >>> measures = InformationMeasures(model, k_list=(5, 50))
    >>> table = measures.fit_transform(streams)  # doctest: +SKIP
    """

    def __init__(self, model=None, k_list=DEFAULT_K, n_jobs=1):
        self.model = model
        self.k_list = k_list
        self.n_jobs = n_jobs

    def fit(self, streams=None, y=None):
        if self.model is None:
            raise InputError("InformationMeasures needs a fitted language model")
        V = self.model.vocab_size
        self.k_list_ = tuple(sorted({int(k) for k in self.k_list if int(k) <= V} | {V}))
        return self

    def transform(self, streams) -> pd.DataFrame:
        if not hasattr(self, "k_list_"):
            self.fit()
        self.scored_ = score_corpus(self.model, streams, self.k_list_, n_jobs=self.n_jobs)
        return self.scored_.to_frame()
