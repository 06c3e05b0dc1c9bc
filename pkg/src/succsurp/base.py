"""Incremental conditional language-model contract and model container I/O.

Every probability model exposes the same three operations: an initial
context state, ``advance(state, token)`` and ``log_next_distribution(state)``.
States are immutable values tagged with the fingerprint of the model that
produced them, so they can be copied freely and a state handed to the wrong
model is caught.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractError, InputError
from .vocab import Vocabulary

CONTAINER_VERSION = 1
_MODEL_KINDS = {}


def register_model(kind):
    def deco(cls):
        cls.kind = kind
        _MODEL_KINDS[kind] = cls
        return cls

    return deco


class LanguageModel(BaseEstimator):
    """Base class for incremental language models.

    Subclasses implement ``fit``, ``_initial_state``, ``_advance``,
    ``_log_next`` and the pair ``_state_arrays`` / ``_restore``.
    """

    kind = "abstract"

    # -- contract ---------------------------------------------------------
    def initial_state(self):
        check_is_fitted(self, "vocab_")
        return self._initial_state()

    def advance(self, state, token):
        self._check_state(state)
        token = int(token)
        if not 0 <= token < len(self.vocab_):
            raise InputError(f"token id {token} outside vocabulary of size {len(self.vocab_)}")
        return self._advance(state, token)

    def log_next_distribution(self, state) -> np.ndarray:
        """Natural-log probabilities of every vocabulary id as the next token."""
        self._check_state(state)
        return self._log_next(state)

    def next_distribution(self, state) -> np.ndarray:
        logp = self.log_next_distribution(state)
        p = np.exp(logp - logp.max())
        return p / p.sum()

    def state_after(self, ids):
        state = self.initial_state()
        for tok in ids:
            state = self.advance(state, tok)
        return state

    @property
    def vocab_size(self):
        return len(self.vocab_)

    def _check_state(self, state):
        check_is_fitted(self, "vocab_")
        owner = getattr(state, "owner", None)
        if owner != self.fingerprint_:
            raise ContractError(
                f"context state belongs to model {owner!r}, not {self.fingerprint_!r}"
            )

    # -- persistence ------------------------------------------------------
    def _finalize(self):
        """Compute the fingerprint once all fitted attributes exist."""
        meta, arrays = self._state_arrays()
        h = hashlib.sha256(json.dumps({"params": self.get_params(), "meta": meta}, sort_keys=True).encode())
        h.update("\x1f".join(self.vocab_.entries).encode("utf-8"))
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name])
            h.update(name.encode())
            h.update(str(a.dtype).encode() + str(a.shape).encode())
            h.update(a.tobytes())
        self.fingerprint_ = f"{self.kind}-{h.hexdigest()[:16]}"
        return self

    def save(self, path):
        check_is_fitted(self, "vocab_")
        meta, arrays = self._state_arrays()
        header = {
            "format": "succsurp-model",
            "version": CONTAINER_VERSION,
            "kind": self.kind,
            "params": self.get_params(),
            "vocab": list(self.vocab_.entries),
            "fingerprint": self.fingerprint_,
            "meta": meta,
            "shapes": {k: list(np.shape(v)) for k, v in arrays.items()},
        }
        buf = io.BytesIO()
        np.savez_compressed(buf, __header__=np.array(json.dumps(header)), **arrays)
        Path(path).write_bytes(buf.getvalue())
        return path


def load_model(path) -> LanguageModel:
    """Read a model container written by :meth:`LanguageModel.save`."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"model file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            arrays = {k: data[k] for k in data.files if k != "__header__"}
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{path}: not a model container ({exc})") from exc
    if header.get("format") != "succsurp-model" or "version" not in header:
        raise InputError(f"{path}: missing container format/version")
    if header["version"] > CONTAINER_VERSION:
        raise InputError(f"{path}: container version {header['version']} is newer than supported")
    cls = _MODEL_KINDS.get(header["kind"])
    if cls is None:
        raise InputError(f"{path}: unknown model kind {header['kind']!r}")
    for name, shape in header["shapes"].items():
        if list(arrays[name].shape) != shape:
            raise InputError(f"{path}: array {name} has shape {arrays[name].shape}, expected {shape}")
    model = cls(**header["params"])
    model.vocab_ = Vocabulary.from_entries(header["vocab"])
    model._restore(header["meta"], arrays)
    model._finalize()
    if model.fingerprint_ != header["fingerprint"]:
        raise InputError(f"{path}: fingerprint mismatch, file is corrupt")
    return model


def next_distribution(model: LanguageModel, state) -> np.ndarray:
    return model.next_distribution(state)


def advance(model: LanguageModel, state, token):
    return model.advance(state, token)
