import itertools
import math

import numpy as np
import pytest

from succsurp import (
    InformationMeasures,
    InputError,
    KneserNeyLM,
    UndefinedCorrelationError,
    bounded_entropy,
    corpus_entropy_estimate,
    entropy,
    pearson_r,
    score_corpus,
    surprisal,
)
from succsurp.measures import ScoredCorpus, paired, top_k_indices, write_scatter
from succsurp.vocab import encode


class TestSurprisal:
    def test_certain(self):
        assert surprisal([0.0, 1.0], 1) == 0.0

    def test_half(self):
        assert surprisal([0.5, 0.5], 0) == pytest.approx(math.log(2), abs=1e-15)

    def test_floor(self):
        assert surprisal([0.0, 1.0], 0, p_min=1e-12) == pytest.approx(27.631021115928547, abs=1e-12)

    def test_bad_token(self):
        with pytest.raises(InputError):
            surprisal([0.5, 0.5], 2)


class TestEntropy:
    def test_uniform_four(self):
        assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-15)

    def test_point_mass(self):
        assert entropy([0.0, 1.0, 0.0]) == 0.0

    def test_analytic(self):
        assert entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), abs=1e-15)


class TestBoundedEntropy:
    def test_top_two(self):
        got = bounded_entropy([0.5, 0.25, 0.125, 0.125], 2)
        assert got == pytest.approx(-(0.5 * math.log(0.5) + 0.25 * math.log(0.25)), abs=1e-15)

    def test_full_is_entropy(self, rng):
        p = rng.dirichlet(np.ones(50))
        assert bounded_entropy(p, 50) == entropy(p)

    def test_ties_prefer_lower_id(self):
        assert bounded_entropy([0.4, 0.3, 0.3], 2) == pytest.approx(-(0.4 * math.log(0.4) + 0.3 * math.log(0.3)), abs=1e-15)
        for perm in itertools.permutations(range(3)):
            p = np.array([0.4, 0.3, 0.3])[list(perm)]
            kept = top_k_indices(p, 2)
            tied = np.flatnonzero(p == 0.3)
            assert tied.min() in kept and tied.max() not in kept

    def test_renormalized_variant(self):
        assert bounded_entropy([0.5, 0.25, 0.25], 1, renormalize=True) == 0.0
        assert bounded_entropy([0.4, 0.4, 0.2], 2, renormalize=True) == pytest.approx(math.log(2))

    @pytest.mark.parametrize("k", [0, 4, 1.5])
    def test_k_out_of_range(self, k):
        with pytest.raises(InputError):
            bounded_entropy([0.5, 0.3, 0.2], k)


class TestScoring:
    def test_single_token_stream(self, small_model):
        m, stream = small_model
        sc = score_corpus(m, [encode(m.vocab_, ["the"])])
        (rec,) = list(sc.streams[0].records())
        assert rec.successor_surprisal is None

    def test_successor_is_shifted_surprisal(self, small_model):
        m, stream = small_model
        s = score_corpus(m, [stream], [5]).streams[0]
        assert np.array_equal(s.successor_surprisal[:-1], s.surprisal[1:])
        assert np.isnan(s.successor_surprisal[-1])

    def test_matches_step_by_step(self, small_model):
        m, stream = small_model
        s = score_corpus(m, [stream], [3, m.vocab_size]).streams[0]
        state = m.initial_state()
        for t, tok in enumerate(stream.ids):
            assert s.surprisal[t] == pytest.approx(surprisal(m.next_distribution(state), tok), abs=1e-12)
            state = m.advance(state, tok)
            d = m.next_distribution(state)
            assert s.entropy[t] == pytest.approx(entropy(d), abs=1e-12)
            assert s.bounded[3][t] == pytest.approx(bounded_entropy(d, 3), abs=1e-12)
            assert s.bounded[m.vocab_size][t] == s.entropy[t]

    def test_unigram_constant_entropy(self, small_model):
        big, stream = small_model
        m = KneserNeyLM(order=1, discount=0.5).fit([stream], big.vocab_)
        p = m.next_distribution(m.initial_state())
        s = score_corpus(m, [stream]).streams[0]
        assert np.ptp(s.entropy) == 0.0
        assert s.entropy[0] == pytest.approx(entropy(p), abs=1e-12)
        np.testing.assert_allclose(s.surprisal, -np.log(p[stream.ids]), atol=1e-12)
        assert np.ptp(s.surprisal) > 0

    def test_threads_match_serial(self, small_model):
        m, stream = small_model
        halves = [encode(m.vocab_, list(stream.words[:20]), "a"), encode(m.vocab_, list(stream.words[20:]), "b")]
        a = score_corpus(m, halves, [5], n_jobs=1).to_frame()
        b = score_corpus(m, halves, [5], n_jobs=2).to_frame()
        assert a.equals(b)

    def test_vocabulary_mismatch(self, small_model, abab):
        m, _ = small_model
        vocab, streams = abab
        with pytest.raises(InputError):
            score_corpus(m, streams)

    def test_csv_round_trip(self, small_model, tmp_path):
        m, stream = small_model
        sc = score_corpus(m, [stream], [5, 10])
        sc.to_csv(tmp_path / "s.csv")
        back = ScoredCorpus.from_csv(tmp_path / "s.csv")
        assert len(back) == len(stream)
        for name in ("surprisal", "successor_surprisal", "entropy", "entropy_top5", "entropy_top10"):
            np.testing.assert_array_equal(back.column(name), sc.column(name))
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "story_id,position,word,surprisal,successor_surprisal,entropy,entropy_top5,entropy_top10"
        assert lines[-1].split(",")[4] == ""

    def test_base_two_display(self, small_model, tmp_path):
        m, stream = small_model
        sc = score_corpus(m, [stream])
        sc.to_csv(tmp_path / "bits.csv", log_base=2)
        bits = ScoredCorpus.from_csv(tmp_path / "bits.csv")
        np.testing.assert_allclose(bits.column("entropy"), sc.column("entropy") / math.log(2), rtol=1e-15)

    def test_scatter_r(self, small_model, tmp_path):
        m, stream = small_model
        sc = score_corpus(m, [stream])
        r = write_scatter(sc, tmp_path / "scatter.csv")
        data = np.loadtxt(tmp_path / "scatter.csv", delimiter=",", skiprows=1)
        assert r == pytest.approx(pearson_r(data[:, 0], data[:, 1]), abs=1e-15)
        assert r == pytest.approx(pearson_r(*paired(sc, "successor_surprisal", "entropy")), abs=1e-15)


class TestCorpusEntropy:
    def test_constant(self):
        assert corpus_entropy_estimate(np.full(5, 1.7)) == pytest.approx(1.7)

    def test_two_values(self):
        assert corpus_entropy_estimate([math.log(2), math.log(8)]) == pytest.approx(2 * math.log(2))

    def test_absent_values_ignored(self):
        assert corpus_entropy_estimate([1.0, np.nan, 3.0]) == 2.0

    def test_empty(self):
        with pytest.raises(InputError):
            corpus_entropy_estimate([np.nan])


class TestPearson:
    def test_linear(self):
        x = np.arange(10.0)
        assert pearson_r(x, 2 * x + 1) == 1.0
        assert pearson_r(x, -x) == -1.0

    def test_formula(self):
        assert pearson_r([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)

    def test_zero_variance(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson_r([1, 1, 1], [1, 2, 3])

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            pearson_r([1, 2], [1, 2, 3])


def test_transformer_adds_full_vocabulary(small_model):
    m, stream = small_model
    tm = InformationMeasures(m, k_list=(5, 10_000))
    frame = tm.fit_transform([stream])
    assert tm.k_list_ == (5, m.vocab_size)
    assert len(frame) == len(stream)
    np.testing.assert_array_equal(frame[f"entropy_top{m.vocab_size}"], frame["entropy"])
