import itertools

import numpy as np
import pytest

from src.models import init_model
from src.numcore import NonFiniteLossError
from src.objectives import ar_example, collate
from src.trainer import Trainer, TrainerSettings


@pytest.fixture
def batch():
    return collate([ar_example([6, 7, 8], [9, 10]), ar_example([11], [12, 13, 14])])


def test_settings_validation():
    with pytest.raises(ValueError):
        TrainerSettings(steps=-1)
    with pytest.raises(ValueError):
        TrainerSettings(lr=0)
    with pytest.raises(ValueError):
        TrainerSettings(log_every=0)


def test_warmup_ramps_linearly(tiny_config):
    trainer = Trainer(tiny_config, init_model(tiny_config, 0), TrainerSettings(lr=1e-3, warmup_steps=4))
    assert [trainer.learning_rate(s) for s in range(6)] == pytest.approx(
        [2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3])
    flat = Trainer(tiny_config, init_model(tiny_config, 0), TrainerSettings(lr=1e-3, warmup_steps=0))
    assert flat.learning_rate(0) == 1e-3


def test_fit_lowers_the_loss(tiny_config, batch):
    trainer = Trainer(tiny_config, init_model(tiny_config, 0), TrainerSettings(steps=60, lr=1e-2, warmup_steps=5))
    result = trainer.fit(itertools.repeat(batch))
    assert result.steps == 60 and not result.interrupted
    assert result.final_loss < result.losses[0] / 2
    assert trainer.state.step == 60


def test_fit_stops_when_the_stream_ends(tiny_config, batch, caplog):
    trainer = Trainer(tiny_config, init_model(tiny_config, 0), TrainerSettings(steps=5))
    result = trainer.fit(iter([batch, batch]))
    assert result.steps == 2
    assert 'Batch stream ended after 2 steps' in caplog.text


def test_fit_honours_shutdown(tiny_config, batch):
    calls = iter([False, True])
    trainer = Trainer(tiny_config, init_model(tiny_config, 0), TrainerSettings(steps=5))
    result = trainer.fit(itertools.repeat(batch), should_shutdown=lambda: next(calls))
    assert result.steps == 1 and result.interrupted


def test_non_finite_loss_is_fatal(tiny_config, batch):
    params = init_model(tiny_config, 0)
    params['embeddings.token'].data[:] = np.nan
    with pytest.raises(NonFiniteLossError):
        Trainer(tiny_config, params, TrainerSettings(steps=1)).train_step(batch)
