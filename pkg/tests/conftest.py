import numpy as np
import pytest

from fpdg import tensor as T
from fpdg.data import build_vocab, default_schema, generate_corpus
from fpdg.model import FPDG, ModelConfig


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def corpus(schema):
    return generate_corpus(schema, 200, seed=3)


@pytest.fixture(scope="session")
def vocab(corpus):
    return build_vocab(corpus)


def tiny_model(vocab_size=12, n_labels=4, d=4, seed=0, **kw):
    return FPDG(ModelConfig(vocab_size=vocab_size, n_labels=n_labels, d=d, seed=seed, **kw))
