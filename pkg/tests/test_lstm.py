import math

import numpy as np
import pytest

from succsurp import InputError, LstmConfig, LstmLM, NumericError, TrainingError, gradient_check, train
from succsurp.lstm import forward_step, init_params
from succsurp.vocab import UNK, Vocabulary, encode


def sig(x):
    return 1 / (1 + math.exp(-x))


def tiny_vocab(n):
    return Vocabulary.from_entries([UNK] + [f"w{i}" for i in range(1, n)])


def random_model(V=7, E=4, H=5, L=2, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    params = {"embedding": rng.uniform(-scale, scale, (V, E))}
    for layer in range(L):
        n_in = E if layer == 0 else H
        params[f"W{layer}"] = rng.uniform(-scale, scale, (n_in + H, 4 * H))
        params[f"b{layer}"] = rng.uniform(-scale, scale, 4 * H)
    params["W_out"] = rng.uniform(-scale, scale, (H, V))
    params["b_out"] = rng.uniform(-scale, scale, V)
    return LstmLM.from_parameters(tiny_vocab(V), params, embed_dim=E, hidden_dim=H, num_layers=L)


def rollout(params, tokens, L, H):
    """Explicit step-by-step LSTM equations, gates ordered i, f, o, g."""
    h = [np.zeros(H) for _ in range(L)]
    c = [np.zeros(H) for _ in range(L)]
    for tok in tokens:
        x = params["embedding"][tok]
        for layer in range(L):
            W, b = params[f"W{layer}"], params[f"b{layer}"]
            n_in = x.size
            pre = x @ W[:n_in] + h[layer] @ W[n_in:] + b
            i = 1 / (1 + np.exp(-pre[:H]))
            f = 1 / (1 + np.exp(-pre[H : 2 * H]))
            o = 1 / (1 + np.exp(-pre[2 * H : 3 * H]))
            g = np.tanh(pre[3 * H :])
            c[layer] = f * c[layer] + i * g
            h[layer] = o * np.tanh(c[layer])
            x = h[layer]
    return h, c


def test_state_equals_rollout():
    m = random_model()
    tokens = [3, 1, 4, 1, 5, 2, 6]
    for t in range(len(tokens) + 1):
        state = m.state_after(tokens[:t])
        h, c = rollout(m.params_, tokens[:t], 2, 5)
        for layer in range(2):
            np.testing.assert_allclose(state.h[layer], h[layer], atol=1e-12)
            np.testing.assert_allclose(state.c[layer], c[layer], atol=1e-12)


def test_hand_evaluated_single_unit():
    vocab = Vocabulary.from_entries([UNK, "a"])
    params = {
        "embedding": np.array([[0.5], [1.0]]),
        "W0": np.array([[0.3, -0.2, 0.4, 0.7], [0.1, 0.2, -0.3, 0.5]]),
        "b0": np.array([0.1, 1.0, 0.0, -0.1]),
        "W_out": np.array([[1.5, -0.5]]),
        "b_out": np.array([0.2, -0.1]),
    }
    m = LstmLM.from_parameters(vocab, params, embed_dim=1, hidden_dim=1, num_layers=1)

    # step 1: token "a" (x = 1.0) from h = c = 0
    i, f, o, g = sig(0.3 + 0.1), sig(-0.2 + 1.0), sig(0.4), math.tanh(0.7 - 0.1)
    c1 = i * g
    h1 = o * math.tanh(c1)
    # step 2: token UNK (x = 0.5)
    i = sig(0.3 * 0.5 + 0.1 * h1 + 0.1)
    f = sig(-0.2 * 0.5 + 0.2 * h1 + 1.0)
    o = sig(0.4 * 0.5 - 0.3 * h1)
    g = math.tanh(0.7 * 0.5 + 0.5 * h1 - 0.1)
    c2 = f * c1 + i * g
    h2 = o * math.tanh(c2)
    z0, z1 = 1.5 * h2 + 0.2, -0.5 * h2 - 0.1
    p1 = math.exp(z1) / (math.exp(z0) + math.exp(z1))

    s, dist = forward_step(m, m.initial_state(), 1)
    s, dist = forward_step(m, s, 0)
    assert s.c[0][0] == pytest.approx(c2, abs=1e-14)
    assert dist[1] == pytest.approx(p1, abs=1e-14)
    assert dist.sum() == pytest.approx(1.0, abs=1e-12)


def test_zero_weights_give_uniform():
    V = 6
    cfg = dict(embed_dim=3, hidden_dim=4, num_layers=2)
    params = {k: np.zeros_like(v) for k, v in init_params(V, LstmConfig(**cfg), np.random.default_rng(0)).items()}
    m = LstmLM.from_parameters(tiny_vocab(V), params, **cfg)
    _, dist = forward_step(m, m.initial_state(), 2)
    np.testing.assert_allclose(dist, np.full(V, 1 / V), atol=1e-15)


def test_bitwise_determinism():
    a, b = random_model(seed=3), random_model(seed=3)
    da = a.next_distribution(a.state_after([1, 2, 3]))
    db = b.next_distribution(b.state_after([1, 2, 3]))
    assert da.tobytes() == db.tobytes()


def test_distributions_valid():
    m = random_model(scale=2.0)
    state = m.initial_state()
    for tok in [1, 2, 3, 4, 5, 6] * 5:
        state, dist = forward_step(m, state, tok)
        assert abs(dist.sum() - 1) < 1e-6 and (dist > 0).all()


def test_non_finite_activation_names_layer():
    m = random_model()
    m.params_["W1"][0, 0] = np.nan
    with pytest.raises(NumericError) as err:
        m.state_after([1, 2])
    assert err.value.layer == 1


def cycle_corpus(n_types=40, length=200, seed=0):
    order = np.random.default_rng(seed).permutation(np.arange(1, n_types + 1))
    ids = np.resize(order, length)
    vocab = tiny_vocab(n_types + 1)
    return vocab, encode(vocab, [vocab.word(i) for i in ids], "cycle")


def test_overfits_deterministic_sequence():
    vocab, stream = cycle_corpus()
    # constant step size: this probes capacity and BPTT, not the decay schedule
    cfg = LstmConfig(embed_dim=32, hidden_dim=64, num_layers=2, dropout=0.0, batch_size=1, bptt_len=20,
                     epochs=40, learning_rate=0.5, lr_decay=1.0, patience=40, seed=0)
    m = train([stream], cfg, vocab, validation=[stream])
    assert m.cross_entropy([stream]) < 0.1
    losses = [h["train_loss"] for h in m.history_]
    increases = sum(b > a for a, b in zip(losses[1:], losses[2:]))
    assert increases <= 1


def test_zero_learning_rate_leaves_parameters():
    vocab, stream = cycle_corpus(10, 60)
    cfg = LstmConfig(embed_dim=4, hidden_dim=5, epochs=1, learning_rate=0.0, batch_size=2, bptt_len=8, seed=5)
    m = train([stream], cfg, vocab)
    init = init_params(len(vocab), cfg, np.random.default_rng(5))
    for k, v in init.items():
        np.testing.assert_array_equal(m.params_[k], v)


def test_early_stopping_restores_best(monkeypatch):
    vocab, stream = cycle_corpus(10, 60)
    scripted = iter([5.0, 4.0, 4.5, 4.6, 4.7, 4.8])
    snapshots = []

    def fake_eval(self, streams):
        snapshots.append({k: v.copy() for k, v in self.params_.items()})
        return next(scripted)

    monkeypatch.setattr(LstmLM, "_evaluate", fake_eval)
    m = LstmLM(embed_dim=4, hidden_dim=5, epochs=10, patience=2, batch_size=2, bptt_len=8, dropout=0.0)
    m.fit([stream], vocab, validation=[stream])
    assert len(m.history_) == 3  # epoch 1 improves, epochs 2 and 3 do not
    assert [h["lr"] for h in m.history_] == [1.0, 1.0, 0.5]
    for k, v in snapshots[1].items():  # parameters after epoch 1
        np.testing.assert_array_equal(m.params_[k], v)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_step():
    vocab, stream = cycle_corpus(10, 60)
    m = LstmLM(embed_dim=4, hidden_dim=5, epochs=2, batch_size=2, bptt_len=8, learning_rate=float("inf"), dropout=0.0)
    with pytest.raises(TrainingError) as err:
        m.fit([stream], vocab)
    assert err.value.epoch is not None


@pytest.mark.parametrize("field,value", [("hidden_dim", 0), ("dropout", 1.0), ("learning_rate", -1.0)])
def test_config_validation(field, value):
    with pytest.raises(InputError):
        LstmConfig(**{field: value}).validate()


class TestGradientCheck:
    batch = (np.array([[1, 2], [3, 4], [5, 6], [2, 1], [4, 3]]), np.array([[3, 4], [5, 6], [2, 1], [4, 3], [6, 5]]))

    def test_matches_finite_differences(self):
        assert gradient_check(random_model(), self.batch) < 1e-4

    def test_negated_gradient_detected(self):
        def corrupt(grads):
            g = grads["W0"].reshape(-1)
            j = np.argmax(np.abs(g))
            g[j] = -g[j]
            return grads

        assert gradient_check(random_model(), self.batch, grad_transform=corrupt) > 1e-1

    def test_empty_minibatch(self):
        with pytest.raises(InputError):
            gradient_check(random_model(), (np.empty((0, 1), int), np.empty((0, 1), int)))

    def test_epsilon_range(self):
        with pytest.raises(InputError):
            gradient_check(random_model(), self.batch, epsilon=1e-2)
