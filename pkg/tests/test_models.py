import logging

import numpy as np
import pytest

from src.checkpoint import PretrainTag
from src.layout import Framework, Objective
from src.models import (
    DialogueModel, FinetuneHyper, LineageError, check_lineage, count_parameters, finetune, init_model,
    params_from_checkpoint, pretrain,
)
from src.transformer import ModelConfig, parameter_shapes

SENTENCES = ['a b c', 'b c a', 'c a b', 'a c b']


def _closed_form_count(L, d, vocab, positions=128, types=2):
    embeddings = (vocab + positions + types) * d
    attention = 4 * (d * d + d) + 2 * d
    ffn = d * 4 * d + 4 * d + 4 * d * d + d + 2 * d
    return embeddings + L * (attention + ffn) + 2 * d + vocab


def test_init_is_deterministic(tiny_config):
    a, b = init_model(tiny_config, 7), init_model(tiny_config, 7)
    assert all(np.array_equal(a[name].data, b[name].data) for name in a)
    c = init_model(tiny_config, 8)
    assert not np.array_equal(a['embeddings.token'].data, c['embeddings.token'].data)


def test_init_values(tiny_config):
    params = init_model(tiny_config, 0)
    assert (params['blocks.0.attn_norm.gamma'].data == 1).all()
    assert not params['blocks.1.ffn.inner.bias'].data.any()
    assert all(t.requires_grad for t in params.values())


def test_parameter_count_matches_closed_form():
    config = ModelConfig(n_layers=2, n_heads=4, hidden_size=64, vocab_size=64)
    assert count_parameters(init_model(config, 0)) == _closed_form_count(2, 64, 64)


def test_encoder_decoder_init_has_both_stacks(tiny_config):
    params = init_model(tiny_config, 0, 'encoder-decoder')
    assert set(params) == set(parameter_shapes(tiny_config, 'encoder-decoder'))


def test_pretrain_records_lineage(tiny_config, vocab):
    ckpt = pretrain(tiny_config, SENTENCES, vocab, Objective.MLM, steps=3, batch_size=2, warmup_steps=1)
    assert ckpt.tag is PretrainTag.MLM
    assert ckpt.framework is None
    assert ckpt.step == 3


def test_pretrain_stops_on_shutdown(tiny_config, vocab):
    ckpt = pretrain(tiny_config, SENTENCES, vocab, Objective.AR, steps=5, should_shutdown=lambda: True)
    assert ckpt.step == 0 and ckpt.extra['interrupted'] == 'true'


def test_pretrain_rejects_oversized_vocab(vocab):
    config = ModelConfig(n_layers=1, n_heads=2, hidden_size=8, vocab_size=8)
    with pytest.raises(ValueError, match="does not fit"):
        pretrain(config, SENTENCES, vocab, Objective.AR, steps=1)


@pytest.fixture
def ar_checkpoint(tiny_config, vocab):
    return pretrain(tiny_config, SENTENCES, vocab, Objective.AR, steps=2, batch_size=2, warmup_steps=1)


def test_lineage_mismatch_needs_override(ar_checkpoint, caplog):
    with pytest.raises(LineageError, match="pretraining lineage mismatch"):
        check_lineage(Framework.FG_FREE, ar_checkpoint)
    check_lineage(Framework.DEC, ar_checkpoint)
    with caplog.at_level(logging.WARNING):
        check_lineage(Framework.MLM, ar_checkpoint, force=True)
    assert 'overridden' in caplog.text


def test_ed_copies_pretrained_blocks_into_both_stacks(ar_checkpoint):
    params = params_from_checkpoint(ar_checkpoint, Framework.ED, seed=0)
    pretrained = ar_checkpoint.params
    np.testing.assert_array_equal(params['encoder.0.attn.query.weight'].data, pretrained['blocks.0.attn.query.weight'])
    np.testing.assert_array_equal(params['decoder.1.ffn.outer.weight'].data, pretrained['blocks.1.ffn.outer.weight'])
    np.testing.assert_array_equal(params['embeddings.token'].data, pretrained['embeddings.token'])
    assert 'decoder.0.cross.query.weight' in params
    assert 'blocks.0.cross.query.weight' not in pretrained


def test_target_type_row_starts_from_source_row(ar_checkpoint):
    params = params_from_checkpoint(ar_checkpoint, Framework.DEC, seed=0)
    types = params['embeddings.type'].data
    np.testing.assert_array_equal(types[1], types[0])


def test_finetune_from_pretrained(ar_checkpoint, samples, vocab):
    hyper = FinetuneHyper(steps=2, batch_size=2, warmup_steps=1, interval=3)
    ckpt = finetune(Framework.DEC, ar_checkpoint, samples, vocab, hyper)
    assert ckpt.framework == 'dec' and ckpt.tag is PretrainTag.AR and ckpt.step == 2
    model = DialogueModel.from_checkpoint(ckpt)
    assert model.framework is Framework.DEC and model.interval == 3


def test_finetune_random_init_needs_config(samples, vocab, tiny_config):
    with pytest.raises(ValueError):
        finetune(Framework.MLM, None, samples, vocab, FinetuneHyper(steps=1))
    ckpt = finetune(Framework.MLM, None, samples, vocab, FinetuneHyper(steps=1, batch_size=3), tiny_config)
    assert ckpt.tag is PretrainTag.NONE


def test_finetune_logs_sample_count(ar_checkpoint, samples, vocab, caplog):
    with caplog.at_level(logging.INFO):
        finetune(Framework.ED, ar_checkpoint, samples, vocab, FinetuneHyper(steps=1, subset=2))
    assert 'training samples 2' in caplog.text


def test_finetuned_checkpoint_resumes_only_its_framework(ar_checkpoint, samples, vocab):
    ckpt = finetune(Framework.AR, ar_checkpoint, samples, vocab, FinetuneHyper(steps=1, force_lineage=True))
    with pytest.raises(ValueError, match="fine-tuned for ar"):
        params_from_checkpoint(ckpt, Framework.MLM, seed=0)
    with pytest.raises(ValueError, match="fine-tuned for ar"):
        DialogueModel.from_checkpoint(ckpt, Framework.MLM)


def test_pretrained_checkpoint_cannot_generate(ar_checkpoint):
    with pytest.raises(ValueError, match="pretrained only"):
        DialogueModel.from_checkpoint(ar_checkpoint)


def test_resumed_finetune_continues_the_step_count(ar_checkpoint, samples, vocab):
    hyper = FinetuneHyper(steps=2, batch_size=2, warmup_steps=1)
    first = finetune(Framework.DEC, ar_checkpoint, samples, vocab, hyper)
    assert first.step == 2
    second = finetune(Framework.DEC, first, samples, vocab, FinetuneHyper(steps=3, batch_size=2, warmup_steps=1))
    assert second.step == 5
