"""Stacked-LSTM language model in numpy with truncated BPTT training.

Gate layout inside every ``(input + hidden) x 4H`` weight matrix is
``[input, forget, output, candidate]``.  Dropout (inverted) is applied to
the input of every layer and to the top layer's output, never to the
recurrent connections.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import expit, log_softmax

from .base import LanguageModel, register_model
from .exceptions import InputError, NumericError, TrainingError
from .vocab import TokenStream, Vocabulary

log = logging.getLogger(__name__)


@dataclass
class LstmConfig:
    """Hyperparameters.  Defaults are desk scale; the original setup was
    embed/hidden 650, two layers, dropout 0.2, batch 128, 40 epochs."""

    embed_dim: int = 64
    hidden_dim: int = 128
    num_layers: int = 2
    dropout: float = 0.2
    batch_size: int = 16
    bptt_len: int = 32
    epochs: int = 10
    learning_rate: float = 1.0
    grad_clip: float = 5.0
    seed: int = 0
    patience: int = 3
    lr_decay: float = 0.5

    def validate(self):
        for name in ("embed_dim", "hidden_dim", "num_layers", "batch_size", "bptt_len"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError("dropout must lie in [0, 1)")
        if self.learning_rate < 0:
            raise InputError("learning_rate must be >= 0")
        if self.grad_clip <= 0:
            raise InputError("grad_clip must be > 0")
        if self.patience < 1:
            raise InputError("patience must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise InputError("lr_decay must lie in (0, 1]")
        return self


@dataclass(frozen=True)
class LstmState:
    owner: str
    h: tuple
    c: tuple


def init_params(vocab_size, cfg: LstmConfig, rng) -> dict:
    """Uniform(-0.1, 0.1) weights, zero biases except forget-gate bias 1."""
    H, d = cfg.hidden_dim, cfg.embed_dim
    p = {"embedding": rng.uniform(-0.1, 0.1, (vocab_size, d))}
    for layer in range(cfg.num_layers):
        n_in = d if layer == 0 else H
        p[f"W{layer}"] = rng.uniform(-0.1, 0.1, (n_in + H, 4 * H))
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0
        p[f"b{layer}"] = b
    p["W_out"] = rng.uniform(-0.1, 0.1, (H, vocab_size))
    p["b_out"] = np.zeros(vocab_size)
    return p


def _dropout_mask(rng, shape, rate):
    if rng is None or rate == 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def loss_and_grads(params, inputs, targets, h0=None, c0=None, dropout=0.0, rng=None, need_grads=True):
    """Mean token cross-entropy of ``targets`` given ``inputs`` and its gradient.

    ``inputs`` and ``targets`` are ``(T, B)`` id arrays.  Returns
    ``(loss, grads, (h_T, c_T))``; the final states are what the next
    truncated-BPTT segment starts from.
    """
    L = sum(1 for k in params if k.startswith("W") and k != "W_out")
    H = params["b0"].shape[0] // 4
    T, B = inputs.shape
    h0 = h0 if h0 is not None else [np.zeros((B, H))] * L
    c0 = c0 if c0 is not None else [np.zeros((B, H))] * L

    a = params["embedding"][inputs]
    caches = []
    hT, cT = [], []
    for layer in range(L):
        W, b = params[f"W{layer}"], params[f"b{layer}"]
        mask = _dropout_mask(rng, a.shape, dropout)
        if mask is not None:
            a = a * mask
        n_in = a.shape[2]
        xh = np.empty((T, B, n_in + H))
        gates = np.empty((T, B, 4 * H))
        cs = np.empty((T, B, H))
        hs = np.empty((T, B, H))
        h, c = h0[layer], c0[layer]
        c_prev = np.empty((T, B, H))
        for t in range(T):
            xh[t, :, :n_in] = a[t]
            xh[t, :, n_in:] = h
            z = xh[t] @ W + b
            g = gates[t]
            g[:, : 3 * H] = expit(z[:, : 3 * H])
            g[:, 3 * H :] = np.tanh(z[:, 3 * H :])
            c_prev[t] = c
            c = g[:, H : 2 * H] * c + g[:, :H] * g[:, 3 * H :]
            h = g[:, 2 * H : 3 * H] * np.tanh(c)
            cs[t], hs[t] = c, h
        caches.append((xh, gates, cs, c_prev, mask, n_in))
        hT.append(h)
        cT.append(c)
        a = hs
    top_mask = _dropout_mask(rng, a.shape, dropout)
    top = a * top_mask if top_mask is not None else a

    logits = top.reshape(T * B, H) @ params["W_out"] + params["b_out"]
    logp = log_softmax(logits, axis=1)
    flat_t = targets.reshape(-1)
    N = flat_t.size
    loss = -logp[np.arange(N), flat_t].mean()
    if not need_grads:
        return loss, None, (hT, cT)

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dlogits = np.exp(logp)
    dlogits[np.arange(N), flat_t] -= 1.0
    dlogits /= N
    grads["W_out"] = top.reshape(T * B, H).T @ dlogits
    grads["b_out"] = dlogits.sum(axis=0)
    da = (dlogits @ params["W_out"].T).reshape(T, B, H)
    if top_mask is not None:
        da = da * top_mask

    for layer in reversed(range(L)):
        W = params[f"W{layer}"]
        xh, gates, cs, c_prev, mask, n_in = caches[layer]
        dW = np.zeros_like(W)
        db = np.zeros(4 * H)
        dx = np.empty((T, B, n_in))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            g = gates[t]
            i, f, o, cand = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
            tc = np.tanh(cs[t])
            dh = da[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc**2)
            dz = np.empty((B, 4 * H))
            dz[:, :H] = dc * cand * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * c_prev[t] * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
            dz[:, 3 * H :] = dc * i * (1.0 - cand**2)
            dW += xh[t].T @ dz
            db += dz.sum(axis=0)
            dxh = dz @ W.T
            dx[t] = dxh[:, :n_in]
            dh_next = dxh[:, n_in:]
            dc_next = dc * f
        grads[f"W{layer}"] = dW
        grads[f"b{layer}"] = db
        da = dx * mask if mask is not None else dx
    np.add.at(grads["embedding"], inputs.reshape(-1), da.reshape(T * B, -1))
    return loss, grads, (hT, cT)


@register_model("lstm")
class LstmLM(LanguageModel):
    """Recurrent language model: embedding, stacked LSTM layers, softmax.

    Trained with plain SGD on truncated-BPTT segments (loss summed over the
    segment's time steps and averaged over the batch), global gradient-norm
    clipping, learning-rate step decay whenever validation cross-entropy
    fails to improve, and early stopping after ``patience`` such epochs.
    The best-validation parameters are kept.
    """

    def __init__(
        self,
        embed_dim=64,
        hidden_dim=128,
        num_layers=2,
        dropout=0.2,
        batch_size=16,
        bptt_len=32,
        epochs=10,
        learning_rate=1.0,
        grad_clip=5.0,
        seed=0,
        patience=3,
        lr_decay=0.5,
    ):
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.dropout = dropout
        self.batch_size = batch_size
        self.bptt_len = bptt_len
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.grad_clip = grad_clip
        self.seed = seed
        self.patience = patience
        self.lr_decay = lr_decay

    @property
    def config(self) -> LstmConfig:
        return LstmConfig(**{f.name: getattr(self, f.name) for f in fields(LstmConfig)})

    @classmethod
    def from_parameters(cls, vocab: Vocabulary, params: dict, **config) -> "LstmLM":
        """Wrap explicit parameter tensors (e.g. hand-set weights) as a model."""
        model = cls(**config)
        model.vocab_ = vocab
        model.params_ = {k: np.array(v, dtype=float) for k, v in params.items()}
        model.history_ = []
        model._check_shapes()
        return model._finalize()

    def _check_shapes(self):
        p, V = self.params_, len(self.vocab_)
        H, d = self.hidden_dim, self.embed_dim
        expected = {"embedding": (V, d), "W_out": (H, V), "b_out": (V,)}
        for layer in range(self.num_layers):
            expected[f"W{layer}"] = ((d if layer == 0 else H) + H, 4 * H)
            expected[f"b{layer}"] = (4 * H,)
        for k, shape in expected.items():
            if k not in p or p[k].shape != shape:
                raise InputError(f"parameter {k} should have shape {shape}")

    # -- training -------------------------------------------------------------
    def fit(self, streams, vocab: Vocabulary, validation=None):
        cfg = self.config.validate()
        streams = [streams] if isinstance(streams, TokenStream) else list(streams)
        for s in streams:
            s.check_vocab(vocab)
        data = np.concatenate([s.ids for s in streams]) if streams else np.empty(0, np.int64)
        if data.size < 2:
            raise InputError("training corpus needs at least two tokens")
        validation = list(validation) if validation else None

        rng = np.random.default_rng(cfg.seed)
        self.vocab_ = vocab
        self.params_ = init_params(len(vocab), cfg, rng)
        self.history_ = []
        self.fingerprint_ = "lstm-training"

        B = min(cfg.batch_size, data.size // 2)
        n_steps = data.size // B
        batched = data[: n_steps * B].reshape(B, n_steps).T
        lr = cfg.learning_rate
        best = (self._evaluate(validation or streams), {k: v.copy() for k, v in self.params_.items()})
        bad = 0
        for epoch in range(1, cfg.epochs + 1):
            h = c = None
            losses = []
            for step, i in enumerate(range(0, n_steps - 1, cfg.bptt_len)):
                T = min(cfg.bptt_len, n_steps - 1 - i)
                loss, grads, (h, c) = loss_and_grads(
                    self.params_, batched[i : i + T], batched[i + 1 : i + 1 + T], h, c, cfg.dropout, rng
                )
                if not math.isfinite(loss):
                    raise TrainingError(f"loss became {loss} at epoch {epoch}, step {step}", epoch, step)
                # step on the per-sequence loss: summed over time, averaged over the batch
                for g in grads.values():
                    g *= T
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                scale = lr * min(1.0, cfg.grad_clip / norm) if norm > 0 else 0.0
                if scale:
                    for k, g in grads.items():
                        self.params_[k] -= scale * g
                losses.append(loss)
            if not all(np.isfinite(v).all() for v in self.params_.values()):
                raise TrainingError(f"non-finite parameters after epoch {epoch}", epoch, None)
            val = self._evaluate(validation or streams)
            train_loss = float(np.mean(losses)) if losses else float("nan")
            self.history_.append({"epoch": epoch, "train_loss": train_loss, "valid_xent": val, "lr": lr})
            log.info("epoch %d train %.4f valid %.4f lr %.4g", epoch, train_loss, val, lr)
            if val < best[0]:
                best = (val, {k: v.copy() for k, v in self.params_.items()})
                bad = 0
            else:
                bad += 1
                lr *= cfg.lr_decay
                if bad >= cfg.patience:
                    log.info("early stopping after epoch %d", epoch)
                    break
        self.params_ = best[1]
        self.best_valid_xent_ = best[0]
        return self._finalize()

    def _evaluate(self, streams) -> float:
        """Mean per-token cross-entropy (nats), each stream from the zero state."""
        total, n = 0.0, 0
        for s in streams:
            ids = np.asarray(s.ids)
            if ids.size == 0:
                continue
            total -= float(log_softmax(self.params_["b_out"])[ids[0]])
            n += 1
            if ids.size > 1:
                loss, _, _ = loss_and_grads(self.params_, ids[:-1, None], ids[1:, None], need_grads=False)
                total += loss * (ids.size - 1)
                n += ids.size - 1
        return total / n if n else float("nan")

    def cross_entropy(self, streams) -> float:
        streams = [streams] if isinstance(streams, TokenStream) else list(streams)
        return self._evaluate(streams)

    # -- incremental contract ------------------------------------------------------
    def _initial_state(self):
        z = np.zeros(self.hidden_dim)
        z.setflags(write=False)
        return LstmState(self.fingerprint_, (z,) * self.num_layers, (z,) * self.num_layers)

    def _advance(self, state, token):
        p = self.params_
        H = self.hidden_dim
        x = p["embedding"][token]
        hs, cs = [], []
        for layer in range(self.num_layers):
            z = np.concatenate([x, state.h[layer]]) @ p[f"W{layer}"] + p[f"b{layer}"]
            i, f, o = expit(z[:H]), expit(z[H : 2 * H]), expit(z[2 * H : 3 * H])
            g = np.tanh(z[3 * H :])
            c = f * state.c[layer] + i * g
            h = o * np.tanh(c)
            if not (np.isfinite(h).all() and np.isfinite(c).all()):
                raise NumericError(f"non-finite activation in LSTM layer {layer}", layer=layer)
            h.setflags(write=False)
            c.setflags(write=False)
            hs.append(h)
            cs.append(c)
            x = h
        return LstmState(self.fingerprint_, tuple(hs), tuple(cs))

    def _log_next(self, state):
        logits = state.h[-1] @ self.params_["W_out"] + self.params_["b_out"]
        if not np.isfinite(logits).all():
            raise NumericError("non-finite logits in output layer", layer=self.num_layers)
        return log_softmax(logits)

    def forward_step(self, state, token):
        """Advance by ``token`` and return ``(new_state, next_distribution)``."""
        new = self.advance(state, token)
        return new, self.next_distribution(new)

    # -- persistence ---------------------------------------------------------------
    def _state_arrays(self):
        return {"config": asdict(self.config)}, dict(self.params_)

    def _restore(self, meta, arrays):
        self.params_ = {k: np.asarray(v, dtype=float) for k, v in arrays.items()}
        self.history_ = []
        self._check_shapes()


def forward_step(model: LstmLM, state, token):
    return model.forward_step(state, token)


def train(corpus, config: LstmConfig, vocab: Vocabulary, validation=None) -> LstmLM:
    config.validate()
    return LstmLM(**asdict(config)).fit(corpus, vocab, validation)


def gradient_check(model: LstmLM, minibatch, epsilon=1e-4, n_checks=8, seed=0, grad_transform=None) -> float:
    """Max relative error between BPTT gradients and central differences.

    ``minibatch`` is ``(inputs, targets)`` as ``(T, B)`` (or length-T) id
    arrays.  For every parameter tensor the entry with the largest analytic
    gradient plus ``n_checks`` random entries are compared.  Dropout is off.
    ``grad_transform`` may alter the analytic gradients before comparison
    (used to verify that a corrupted gradient is caught).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise InputError("epsilon must lie in [1e-6, 1e-3]")
    inputs, targets = (np.asarray(a, dtype=np.int64) for a in minibatch)
    if inputs.ndim == 1:
        inputs, targets = inputs[:, None], targets[:, None]
    if inputs.size == 0 or inputs.shape != targets.shape:
        raise InputError("minibatch must be non-empty with matching input/target shapes")
    params = {k: v.astype(np.float64).copy() for k, v in model.params_.items()}
    _, grads, _ = loss_and_grads(params, inputs, targets)
    rng = np.random.default_rng(seed)
    picks = {}
    for name, g in grads.items():
        idx = [int(np.argmax(np.abs(g)))]
        idx += rng.choice(g.size, size=min(n_checks, g.size), replace=False).tolist()
        picks[name] = sorted(set(idx))
    if grad_transform is not None:
        grads = grad_transform({k: v.copy() for k, v in grads.items()})

    worst = 0.0
    for name, idx in picks.items():
        flat = params[name].reshape(-1)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + epsilon
            up = loss_and_grads(params, inputs, targets, need_grads=False)[0]
            flat[j] = orig - epsilon
            down = loss_and_grads(params, inputs, targets, need_grads=False)[0]
            flat[j] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = grads[name].reshape(-1)[j]
            denom = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
