import pytest

from overseg.corpus import assign_splits, parse_corpus_csv

import letterforms

CORPUS_SEED = 20260819
PER_CLASS = 400
FRACTIONS = (0.8, 0.1, 0.1)
SPLIT_SEED = 11


@pytest.fixture(scope="session")
def corpus_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "letters.csv"
    letterforms.write_corpus_csv(str(path), PER_CLASS, seed=CORPUS_SEED)
    return str(path)


@pytest.fixture(scope="session")
def corpus(corpus_csv):
    return parse_corpus_csv(corpus_csv)


@pytest.fixture(scope="session")
def split_corpus(corpus):
    return assign_splits(corpus, FRACTIONS, SPLIT_SEED)


@pytest.fixture(scope="session")
def train_pool(split_corpus):
    return split_corpus.pool("train")


@pytest.fixture(scope="session")
def val_pool(split_corpus):
    return split_corpus.pool("val")


@pytest.fixture(scope="session")
def test_pool(split_corpus):
    return split_corpus.pool("test")
