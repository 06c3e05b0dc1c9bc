"""Bundled-free text sources and synthetic reading-time generation.

``stdlib_prose`` harvests English prose from the docstrings of the running
Python's standard library (parsed with :mod:`ast`, never imported), which
gives a few hundred thousand words of natural text on any machine without
downloads.
"""

from __future__ import annotations

import ast
import os
import re
from pathlib import Path

import numpy as np
import pandas as pd

from .vocab import SENTENCE_FINAL, tokenize_word

_CODEY = re.compile(r"(>>>|\.\.\.\s|[{}\[\]=<>]|::|\(\)|^\s*[-*+]\s|^[A-Z_]+$|https?://)")


def _clean(doc: str) -> str:
    keep = []
    for line in doc.splitlines():
        if not line.strip() or line.startswith((" ", "\t")) or _CODEY.search(line):
            continue
        keep.append(line.strip())
    return " ".join(keep)


def stdlib_prose(min_words_per_doc=50) -> list[str]:
    """One prose document per standard-library module, in a fixed order."""
    root = Path(os.__file__).parent
    files = sorted(list(root.glob("*.py")) + list(root.glob("*/*.py")))
    docs = []
    for f in files:
        rel = f.relative_to(root).as_posix()
        if "test" in rel or "site-packages" in rel or "dist-packages" in rel or rel.startswith("idlelib"):
            continue
        try:
            tree = ast.parse(f.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError):
            continue
        parts = []
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                d = ast.get_docstring(node)
                if d:
                    text = _clean(d)
                    if text:
                        parts.append(text)
        text = " ".join(parts)
        if len(text.split()) >= min_words_per_doc:
            docs.append(text)
    return docs


def words_frame(docs, story_prefix="story") -> pd.DataFrame:
    """Lay documents out in the words-file format, one story per document."""
    rows = []
    for s, doc in enumerate(docs):
        sent = 0
        chunks = doc.split()
        for i, chunk in enumerate(chunks):
            rows.append({"story_id": f"{story_prefix}{s}", "sentence_index": sent, "word_index": i, "word": chunk})
            toks = tokenize_word(chunk)
            if any(t in SENTENCE_FINAL for t in toks[-2:]):
                sent += 1
    return pd.DataFrame(rows, columns=["story_id", "sentence_index", "word_index", "word"])


def simulate_rts(
    table: pd.DataFrame,
    effects: dict,
    n_subjects: int,
    seed: int,
    intercept=300.0,
    subject_sd=20.0,
    item_sd=0.0,
    noise_sd=30.0,
) -> pd.DataFrame:
    """Synthetic reading times for every (subject, word) pair.

    ``table`` has one row per word with the predictor columns named in
    ``effects`` (already z-scored or raw, as the caller prefers) plus
    ``story_id`` and ``word_index``.  RT = intercept + sum(effect * column)
    + subject intercept + item intercept + Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    n_words = len(table)
    base = np.full(n_words, float(intercept))
    for col, b in effects.items():
        base += b * table[col].to_numpy(dtype=float)
    base += rng.normal(0.0, item_sd, n_words) if item_sd else 0.0
    subj = rng.normal(0.0, subject_sd, n_subjects)
    rt = base[None, :] + subj[:, None] + rng.normal(0.0, noise_sd, (n_subjects, n_words))
    rt = np.maximum(rt, 1.0)
    return pd.DataFrame(
        {
            "subject_id": np.repeat([f"s{i}" for i in range(n_subjects)], n_words),
            "story_id": np.tile(table["story_id"].to_numpy(), n_subjects),
            "word_index": np.tile(table["word_index"].to_numpy(), n_subjects),
            "rt_ms": rt.ravel(),
        }
    )
