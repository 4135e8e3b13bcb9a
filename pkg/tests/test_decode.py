import itertools

import numpy as np
import pytest

from src.decode import (
    ConstraintExhaustedError, DecodeParams, Hypothesis, IncrementalScorer, ReferenceScorer, advance_cache,
    apply_constraints, beam_search, calibrate_min_len, fg_discrepancy, generate_responses, reference_decode,
    start_cache, step_capacity, step_scores,
)
from src.layout import Framework
from src.models import DialogueModel, FinetuneHyper, architecture_of, finetune, init_model
from src.numcore import log_softmax
from src.transformer import ModelConfig
from src.utils import EOS_ID, make_rng

A, B, C = 6, 7, 8
TOY_VOCAB = 9


class TableScorer:
    """Scores from a fixed function of the prefix; the state is the prefix itself."""

    def __init__(self, log_probs):
        self.table = log_probs

    def start(self, source):
        return ()

    def log_probs(self, state):
        return self.table(state)

    def advance(self, state, token):
        return state + (token,)


def _fixed(weights):
    logits = np.full(TOY_VOCAB, -30.0)
    for token, value in weights.items():
        logits[token] = value
    return log_softmax(logits)


def _random_table(seed, size=TOY_VOCAB):
    def table(prefix):
        return log_softmax(make_rng(seed, *prefix).normal(size=size) * 2.0)
    return table


@pytest.fixture
def decode_config():
    return ModelConfig(n_layers=2, n_heads=2, hidden_size=16, vocab_size=24, max_positions=128, init_std=0.5)


def _model(config, framework, interval=5, seed=0):
    params = init_model(config, seed, architecture_of(framework))
    return DialogueModel(config, params, framework, interval)


def _sources(count, seed=0):
    rng = make_rng(seed)
    return [[int(t) for t in rng.integers(6, 24, size=int(rng.integers(1, 6)))] for _ in range(count)]


def test_decode_params_validation():
    with pytest.raises(ValueError):
        DecodeParams('dec', beam_size=0)
    with pytest.raises(ValueError):
        DecodeParams('dec', min_len=5, max_len=4)
    with pytest.raises(ValueError):
        DecodeParams('dec', max_len=129)
    assert DecodeParams('pf_free').framework is Framework.PF_FREE


def test_constraints_block_repeats_and_early_eos():
    params = DecodeParams('dec', min_len=3)
    hypothesis = Hypothesis(tokens=(A, B))
    adjusted = apply_constraints(np.zeros(TOY_VOCAB), hypothesis, params)
    assert list(np.flatnonzero(np.isfinite(adjusted))) == [C]
    adjusted = apply_constraints(np.zeros(TOY_VOCAB), hypothesis, DecodeParams('dec', min_len=2))
    assert list(np.flatnonzero(np.isfinite(adjusted))) == [EOS_ID, C]


def test_constraints_exempt_punctuation():
    params = DecodeParams('dec', exempt_ids=frozenset({A}))
    adjusted = apply_constraints(np.zeros(TOY_VOCAB), Hypothesis(tokens=(A, B)), params)
    assert np.isfinite(adjusted[A]) and not np.isfinite(adjusted[B])


def test_constraint_exhaustion():
    with pytest.raises(ConstraintExhaustedError, match="constraint exhaustion"):
        apply_constraints(np.zeros(TOY_VOCAB), Hypothesis(tokens=(A, B, C)), DecodeParams('dec', min_len=5))


def test_blocking_forces_distinct_tokens():
    scorer = TableScorer(lambda prefix: _fixed({A: 3.0, B: 2.0, C: 1.0, EOS_ID: 0.0}))
    best = beam_search(None, [A], DecodeParams('dec', beam_size=2, min_len=3, max_len=4), scorer)
    assert best.finished
    assert best.response == (A, B, C)


def test_min_len_equal_to_max_len_can_finish():
    scorer = TableScorer(lambda prefix: _fixed({A: 3.0, B: 2.0, C: 1.0, EOS_ID: 5.0}))
    best = beam_search(None, [A], DecodeParams('dec', beam_size=2, min_len=3, max_len=3), scorer)
    assert best.finished
    assert best.tokens == (A, B, C, EOS_ID)
    assert best.length == 3


def test_eos_is_the_only_step_after_max_len():
    scorer = TableScorer(lambda prefix: _fixed({A: 3.0, B: 2.0, C: 1.0, EOS_ID: -5.0}))
    best = beam_search(None, [A], DecodeParams('dec', beam_size=2, min_len=1, max_len=2), scorer)
    assert best.finished
    assert best.response == (A, B)


def test_unfinished_search_returns_best_live(caplog):
    def no_eos(prefix):
        scores = _fixed({A: 3.0, B: 2.0, C: 1.0})
        scores[EOS_ID] = -np.inf
        return scores

    best = beam_search(None, [A], DecodeParams('dec', beam_size=1, min_len=1, max_len=3), TableScorer(no_eos))
    assert not best.finished
    assert best.tokens == (A, B, C)
    assert "no hypothesis could finish" in caplog.text


def test_full_length_response_with_a_model(decode_config):
    model = _model(decode_config, Framework.DEC)
    best = beam_search(model, [6, 7], DecodeParams(Framework.DEC, beam_size=2, min_len=4, max_len=4))
    assert best.finished and best.length == 4


@pytest.mark.parametrize('seed', range(5))
def test_beam_one_is_greedy(seed):
    table = _random_table(seed)
    params = DecodeParams('dec', beam_size=1, min_len=1, max_len=4)
    prefix = ()
    for _ in range(params.max_len):
        adjusted = apply_constraints(table(prefix), Hypothesis(tokens=prefix), params)
        prefix += (int(np.argmax(adjusted)),)
        if prefix[-1] == EOS_ID:
            break
    else:
        prefix += (EOS_ID,)
    best = beam_search(None, [A], params, TableScorer(table))
    assert best.tokens == prefix


@pytest.mark.parametrize('seed', range(5))
def test_wide_beam_finds_the_exhaustive_optimum(seed):
    table = _random_table(seed)
    params = DecodeParams('dec', beam_size=16, min_len=1, max_len=4)
    best_score, best_tokens = -np.inf, None
    for length in range(1, 4):
        for words in itertools.permutations((A, B, C), length):
            tokens = words + (EOS_ID,)
            score = sum(table(tokens[:i])[tok] for i, tok in enumerate(tokens))
            if score > best_score:
                best_score, best_tokens = score, tokens
    result = beam_search(None, [A], params, TableScorer(table))
    assert result.tokens == best_tokens
    assert result.score == pytest.approx(best_score)


def test_step_capacity_caps_long_sources():
    assert step_capacity(Framework.MLM, 100, 36) == 28
    assert step_capacity(Framework.FG_FREE, 100, 36) == 14
    assert step_capacity(Framework.ED, 100, 36) == 36


EQUIVALENCE_CASES = [
    (Framework.ED, 5), (Framework.DEC, 5), (Framework.MLM, 5), (Framework.AR, 5),
    (Framework.PF_FREE, 1), (Framework.PF_FREE, 3), (Framework.PF_FREE, 5),
    (Framework.FG_FREE, 5), (Framework.PFFG_FREE, 3),
]


def _check_cached_matches_reference(config, framework, interval, count):
    model = _model(config, framework, interval)
    params = DecodeParams(framework, beam_size=3, min_len=2, max_len=7, interval=interval)
    for source in _sources(count, seed=list(Framework).index(framework) * 10 + interval):
        cached = beam_search(model, source, params)
        reference = reference_decode(model, source, params)
        assert cached.tokens == reference.tokens
        np.testing.assert_allclose(cached.step_log_probs, reference.step_log_probs, atol=1e-5)
        response = [t for t in cached.response if t != EOS_ID]
        assert len(set(response)) == len(response)
        if cached.finished:
            assert cached.length >= params.min_len
        assert all(np.diff(np.cumsum(cached.step_log_probs)) <= 0)


@pytest.mark.parametrize('framework, interval', EQUIVALENCE_CASES)
def test_incremental_decoding_matches_full_recompute(framework, interval, decode_config, double):
    _check_cached_matches_reference(decode_config, framework, interval, count=8)


@pytest.mark.slow
@pytest.mark.parametrize('framework, interval', EQUIVALENCE_CASES)
def test_incremental_decoding_over_a_hundred_sources(framework, interval, decode_config, double):
    _check_cached_matches_reference(decode_config, framework, interval, count=100)


def test_constraints_hold_over_a_thousand_generations():
    punctuation = 19
    for seed in range(1000):
        rng = make_rng(seed)
        min_len = int(rng.integers(1, 6))
        params = DecodeParams('dec', beam_size=int(rng.integers(1, 5)), min_len=min_len, max_len=min_len + 4,
                              exempt_ids=frozenset({punctuation}))
        best = beam_search(None, [A], params, TableScorer(_random_table(seed, size=20)))
        words = [t for t in best.response if t != punctuation]
        assert len(set(words)) == len(words)
        assert not set(best.response) & {0, 1, 2, 4, 5}
        assert best.finished and best.length >= min_len


def test_single_step_decoding_agrees_trivially(decode_config, double):
    model = _model(decode_config, Framework.MLM)
    params = DecodeParams(Framework.MLM, max_len=1)
    assert beam_search(model, [6, 7], params).tokens == reference_decode(model, [6, 7], params).tokens


def test_step_scores_are_normalized(decode_config, double):
    model = _model(decode_config, Framework.FG_FREE)
    hypothesis = Hypothesis(state=start_cache(model, [6, 7, 8]))
    scores = step_scores(model, hypothesis, 0)
    assert scores.shape == (decode_config.vocab_size,)
    assert np.log(np.exp(scores).sum()) == pytest.approx(0.0, abs=1e-5)
    with pytest.raises(ValueError):
        step_scores(model, hypothesis, 1)


def test_dec_cache_touches_only_the_update_range(decode_config, double):
    model = _model(decode_config, Framework.DEC)
    source = [6, 7, 8]
    cache = start_cache(model, source)
    for t, token in enumerate([9, 10, 11, 12], start=1):
        cache = advance_cache(model, cache, token, t)
    snapshot = [h.copy() for h in cache.hidden]
    cache = advance_cache(model, cache, 13, 5)
    untouched = [row for row in range(len(snapshot[0])) if row not in (3 + 4, 3 + 5)]
    for before, after in zip(snapshot, cache.hidden):
        assert np.array_equal(after[untouched], before[untouched])


def test_pf_boundary_step_recomputes_the_prefix(decode_config, double):
    model = _model(decode_config, Framework.PF_FREE, interval=3)
    source = [6, 7]
    cache = start_cache(model, source)
    for t, token in enumerate([9, 10], start=1):
        cache = advance_cache(model, cache, token, t)
    snapshot = [h.copy() for h in cache.hidden]
    cache = advance_cache(model, cache, 11, 3)
    for before, after in zip(snapshot, cache.hidden):
        assert np.array_equal(after[:2], before[:2])
    assert not np.array_equal(cache.hidden[1][2], snapshot[1][2])
    reference = ReferenceScorer(model)
    state = reference.start(source)
    for token in (9, 10, 11):
        state = reference.advance(state, token)
    np.testing.assert_allclose(IncrementalScorer(model).log_probs(cache), reference.log_probs(state), atol=1e-10)


def test_encoder_output_is_shared_across_steps(decode_config, double):
    model = _model(decode_config, Framework.ED)
    first = start_cache(model, [6, 7, 8])
    second = advance_cache(model, first, 9, 1)
    assert second.cross_context is first.cross_context


def test_cache_prefix_mismatch(decode_config):
    model = _model(decode_config, Framework.MLM)
    cache = start_cache(model, [6, 7])
    with pytest.raises(ValueError, match="cache/prefix mismatch"):
        advance_cache(model, cache, 9, 2)


def test_parallel_generation_keeps_input_order(decode_config):
    model = _model(decode_config, Framework.AR)
    params = DecodeParams(Framework.AR, beam_size=2, max_len=5)
    sources = _sources(6, seed=9)
    serial = generate_responses(model, sources, params)
    parallel = generate_responses(model, sources, params, workers=3)
    assert [h.tokens for h in serial] == [h.tokens for h in parallel]


def test_calibration_picks_closest_average(decode_config):
    model = _model(decode_config, Framework.DEC)
    params = DecodeParams(Framework.DEC, beam_size=2, max_len=6)
    sources = _sources(4, seed=3)
    references = [[6, 7, 8, 9]] * 4
    result = calibrate_min_len(model, sources, references, params, candidates=[1, 2, 3, 4])
    assert result.target_avg_len == 4.0
    assert set(result.avg_len_by_min_len) == {1, 2, 3, 4}
    gaps = {m: abs(v - 4.0) for m, v in result.avg_len_by_min_len.items()}
    assert gaps[result.min_len] == min(gaps.values())
    assert all(result.avg_len_by_min_len[m] >= m for m in (1, 2, 3, 4))


def _trained(framework, samples, vocab, config):
    hyper = FinetuneHyper(steps=20, batch_size=3, lr=1e-2, warmup_steps=1, interval=3)
    ckpt = finetune(framework, None, samples, vocab, hyper, config)
    return DialogueModel.from_checkpoint(ckpt).astype('float64')


def _prefixes(count, seed):
    rng = make_rng(seed)
    for _ in range(count):
        source = [int(t) for t in rng.integers(6, 19, size=int(rng.integers(1, 5)))]
        prefix = tuple(int(t) for t in rng.integers(6, 19, size=int(rng.integers(0, 6))))
        continuation = tuple(int(t) for t in rng.integers(6, 19, size=int(rng.integers(0, 3))))
        yield source, prefix, continuation


@pytest.mark.parametrize('framework', [Framework.FG_FREE, Framework.PFFG_FREE])
def test_mask_stream_has_no_training_inference_gap(framework, samples, vocab, decode_config, double):
    model = _trained(framework, samples, vocab, decode_config)
    for source, prefix, continuation in _prefixes(50, seed=1):
        assert fg_discrepancy(model, source, prefix, continuation) < 1e-6


def test_masked_context_creates_a_gap(samples, vocab, decode_config, double):
    model = _trained(Framework.MLM, samples, vocab, decode_config)
    gaps = [fg_discrepancy(model, source, prefix) for source, prefix, _ in _prefixes(50, seed=2) if prefix]
    assert max(gaps) > 0.01
