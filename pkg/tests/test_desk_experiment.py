"""End-to-end desk-scale runs; minutes per framework, so only under --runslow."""

import os
import sys
from statistics import median

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'scripts'))

from run_desk_experiment import run_experiment  # noqa: E402
from src.layout import Framework  # noqa: E402

pytestmark = pytest.mark.slow


@pytest.mark.parametrize('framework', list(Framework))
def test_every_framework_learns_the_reverse_task(framework, tmp_path):
    results = run_experiment(str(tmp_path), [framework], pretrain_steps=2000, finetune_steps=2000, seed=0)
    result = results[framework.value]
    assert result['accuracy'] >= 0.90
    for response in result['responses']:
        words = [w for w in response.split() if w.isalnum()]
        assert len(set(words)) == len(words)
        assert len(response.split()) >= 1


@pytest.mark.parametrize('framework', list(Framework))
def test_pretraining_helps_small_fine_tunes(framework, tmp_path):
    pretrained, random = [], []
    for seed in range(3):
        results = run_experiment(
            str(tmp_path / str(seed)), [framework], pretrain_steps=2000, finetune_steps=500, seed=seed,
            subset=200, with_random_init=True,
        )
        pretrained.append(results[framework.value]['report'].bleu1)
        random.append(results[f'{framework.value}/random']['report'].bleu1)
    assert median(pretrained) > median(random)
