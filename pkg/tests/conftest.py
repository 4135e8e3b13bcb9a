import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from src.data import DialogueSample, build_vocab  # noqa: E402
from src.numcore import precision  # noqa: E402
from src.transformer import ModelConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help="run end-to-end training tests")


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: end-to-end training runs (enable with --runslow)')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, n_heads=2, hidden_size=16, vocab_size=20, max_positions=64, init_std=0.3)


@pytest.fixture
def double():
    with precision('float64'):
        yield


@pytest.fixture
def samples():
    return [
        DialogueSample(('a b c',), 'c b a'),
        DialogueSample(('hello there', 'b d e'), 'e d b'),
        DialogueSample(('what is 2 plus 3',), '2 plus 3 is 5'),
    ]


@pytest.fixture
def vocab(samples):
    return build_vocab(samples)


@pytest.fixture
def corpus_file(tmp_path, samples):
    path = tmp_path / 'train.txt'
    path.write_text(''.join(s.to_line() + '\n' for s in samples), encoding='utf-8')
    return str(path)
