"""Surprisal, successor surprisal and entropy from one language model,
plus the mixed-effects reading-time analysis built on them."""

__version__ = "0.1.0"

from .base import LanguageModel, advance, load_model, next_distribution
from .corpus import (
    PredictorTable,
    ZScore,
    apply_exclusions,
    build_predictor_table,
    load_corpus,
    split_sentences,
    unigram_frequency,
)
from .exceptions import (
    ConfigurationError,
    ContractError,
    InputError,
    IntegrityError,
    NumericError,
    ParseError,
    SuccsurpError,
    TrainingError,
    UndefinedCorrelationError,
    UsageError,
)
from .lstm import LstmConfig, LstmLM, gradient_check, train
from .measures import (
    InformationMeasures,
    ScoredCorpus,
    bounded_entropy,
    corpus_entropy_estimate,
    entropy,
    pearson_r,
    score_corpus,
    surprisal,
)
from .mixed import LMMFit, LMMSpec, LRTResult, MixedLM, chi2_sf, fit_lmm, lrt
from .ngram import KneserNeyLM, sample_stream, train_kn
from .vocab import TokenStream, Vocabulary, build_vocabulary, encode, tokenize

__all__ = [name for name in dir() if not name.startswith("_")]
