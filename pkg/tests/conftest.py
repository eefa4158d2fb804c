"""Shared fixtures: bundled digit corpora at two scales."""

import numpy as np
import pytest

from dpcdbn.datasets import build_digit_corpus, load_digit_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """200 train / 80 test binary digit corpus for fast integration tests."""
    out = tmp_path_factory.mktemp("corpus_small")
    paths = build_digit_corpus(out, n_train=200, n_test=80, seed=0)
    return out, paths


@pytest.fixture(scope="session")
def full_corpus(tmp_path_factory):
    """2000 train / 400 test corpus used by the end-to-end accuracy gates."""
    out = tmp_path_factory.mktemp("corpus_full")
    build_digit_corpus(out, n_train=2000, n_test=400, seed=0)
    return out


@pytest.fixture(scope="session")
def full_corpus_data(full_corpus):
    train, test = load_digit_corpus(full_corpus)
    return train, test


@pytest.fixture
def rng():
    return np.random.default_rng(0)
