import numpy as np
import pytest

from succsurp.ngram import KneserNeyLM
from succsurp.vocab import Vocabulary, build_vocabulary, encode, tokenize


@pytest.fixture
def abab():
    vocab = Vocabulary.from_entries(["<unk>", "a", "b"])
    return vocab, [encode(vocab, ["a", "b", "a", "b"], "s0")]


@pytest.fixture(scope="session")
def small_text():
    return (
        "The cat sat on the mat. The dog sat on the log. "
        "A cat and a dog don't share the mat, but the cat's mat is warm. "
        "Dogs run; cats sit. The log is wet and the mat is dry."
    )


@pytest.fixture(scope="session")
def small_model(small_text):
    toks = tokenize(small_text)
    vocab = build_vocabulary(toks, 40)
    stream = encode(vocab, toks, "doc")
    return KneserNeyLM(order=3, discount=0.75).fit([stream], vocab), stream


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_RESULTS, key=str):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
