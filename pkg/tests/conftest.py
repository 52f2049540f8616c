import numpy as np
import pytest
import torch

from scentvc.features import CorpusConfig, generate_pairs, make_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus():
    return make_corpus(CorpusConfig())


@pytest.fixture(scope="session")
def pairs(corpus):
    return generate_pairs(corpus, 12, seed=7, prefix="t")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
