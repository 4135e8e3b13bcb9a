"""Constrained beam search with per-framework incremental state updates."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .layout import (
    AttentionMask, Framework, Objective, SequenceLayout, Stream, build_framework_mask, build_layout,
    build_pf_interval_mask, incremental_update_range, step_boundary,
)
from .models import DialogueModel
from .numcore import Tensor, log_softmax, no_grad
from .transformer import embed, final_norm, lm_head, output_stack, transformer_block
from .utils import BOS_ID, EOS_ID, MASK_ID, MAX_INPUT_LENGTH, PAD_ID, SEP_ID, UNK_ID

logger = logging.getLogger(__name__)

NEVER_GENERATED = frozenset({PAD_ID, UNK_ID, BOS_ID, SEP_ID, MASK_ID})


class ConstraintExhaustedError(ValueError):
    """Raised when blocking and length constraints leave no admissible token."""


@dataclass(frozen=True)
class DecodeParams:
    """Beam search settings."""

    framework: Framework
    beam_size: int = 4
    min_len: int = 1
    max_len: int = 36
    interval: int = 5
    exempt_ids: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, 'framework', Framework.parse(self.framework))
        if self.beam_size < 1:
            raise ValueError("beam_size must be at least 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"need 1 <= min_len <= max_len, got min_len={self.min_len}, max_len={self.max_len}")
        if self.max_len > MAX_INPUT_LENGTH:
            raise ValueError(f"max_len exceeds the {MAX_INPUT_LENGTH}-token input limit")
        if self.interval < 1:
            raise ValueError("interval must be at least 1")


@dataclass
class Hypothesis:
    """A partial or finished response; `state` is private to the scorer that made it."""

    tokens: Tuple[int, ...] = ()
    score: float = 0.0
    finished: bool = False
    state: Any = None
    step_log_probs: Tuple[float, ...] = ()

    @property
    def response(self) -> Tuple[int, ...]:
        return self.tokens[:-1] if self.finished else self.tokens

    @property
    def length(self) -> int:
        return len(self.response)


# Step contexts


def _step_layout(framework: Framework, source_len: int, t: int, interval: int):
    """(layout, mask, read position) in force while generating target index t."""
    if framework.is_encoder_decoder:
        layout = build_layout(framework, source_len, t + 1)
        return layout.decoder, build_framework_mask(layout).decoder, t
    if framework.is_dual_stream:
        layout = build_layout(framework, source_len, t + 1, open_tail=True)
        boundary = step_boundary(t, interval) if framework.uses_interval else 0
        mask = build_framework_mask(layout, boundary=boundary, interval=interval)
        return layout, mask, layout.position_of(Stream.MASK, t)
    layout = build_layout(framework, source_len, t + 1)
    if framework is Framework.PF_FREE:
        mask = build_pf_interval_mask(layout, interval, step_boundary(t, interval))
    else:
        mask = build_framework_mask(layout)
    return layout, mask, source_len + t


def _step_tokens(framework: Framework, layout: SequenceLayout, source: Sequence[int], prefix: Sequence[int]) -> List[int]:
    if framework.is_encoder_decoder:
        return [BOS_ID] + list(prefix)
    tokens = []
    for slot in layout.slots:
        if slot.stream is Stream.SOURCE:
            tokens.append(source[slot.index])
        elif slot.stream is Stream.MASK:
            tokens.append(MASK_ID)
        elif framework.traits.objective is Objective.AR:
            tokens.append(BOS_ID if slot.index == 0 else prefix[slot.index - 1])
        else:
            tokens.append(MASK_ID if slot.index == len(prefix) else prefix[slot.index])
    return tokens


def step_capacity(framework: Framework, source_len: int, max_len: int) -> int:
    """Largest number of decoding steps (at most max_len) whose layouts fit the input limit."""
    framework = Framework.parse(framework)
    steps = max_len
    while steps > 0:
        try:
            build_layout(framework, source_len, steps, open_tail=framework.is_dual_stream)
            return steps
        except ValueError:
            steps -= 1
    return 0


def reference_logits(model: DialogueModel, source: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
    """Logits for target index len(prefix), recomputing every hidden state from scratch."""
    framework = model.framework
    layout, mask, read = _step_layout(framework, len(source), len(prefix), model.interval)
    tokens = _step_tokens(framework, layout, source, prefix)
    with no_grad():
        cross = model.encode(source) if framework.is_encoder_decoder else None
        return model.logits(layout, tokens, mask, cross)[read]


# Incremental cache


@dataclass
class DecodeCache:
    """Per-layer block inputs (plus the last block's output) for every physical position."""

    step: int
    source: Tuple[int, ...]
    prefix: Tuple[int, ...]
    layout: SequenceLayout
    tokens: List[int]
    hidden: List[np.ndarray]
    cross_context: Optional[Tensor] = None
    logits: Optional[np.ndarray] = None


def _rows_for(framework: Framework, layout: SequenceLayout, indices: Sequence[int], t: int) -> np.ndarray:
    """Physical rows holding the target indices being recomputed at step t."""
    if framework.is_encoder_decoder:
        return np.asarray(indices, dtype=np.int64)
    if framework.is_dual_stream:
        return np.asarray(
            [layout.position_of(Stream.TOKEN if i < t else Stream.MASK, i) for i in indices], dtype=np.int64
        )
    return np.asarray([layout.source_len + i for i in indices], dtype=np.int64)


def _recompute(model: DialogueModel, cache: DecodeCache, rows: np.ndarray, mask: AttentionMask, read: int) -> None:
    config, params = model.config, model.params
    stack = output_stack(params)
    layout = cache.layout
    dtype = params['embeddings.token'].dtype
    allow = mask.softmax_allow()

    embedded = embed(params, np.asarray(cache.tokens)[rows], layout.position_ids[rows], layout.type_ids[rows])
    cache.hidden[0][rows] = embedded.data
    cross_allow = None
    if cache.cross_context is not None:
        cross_allow = np.ones((layout.n, cache.cross_context.shape[1]), dtype=bool)
    for i in range(config.n_layers):
        block_in = Tensor(cache.hidden[i][None], dtype=dtype)
        out = transformer_block(block_in, allow, params, f'{stack}.{i}', config, query_rows=rows,
                                cross_context=cache.cross_context, cross_allow=cross_allow)
        cache.hidden[i + 1][rows] = out.data[0]
    last = Tensor(cache.hidden[-1][read][None], dtype=dtype)
    cache.logits = lm_head(params, final_norm(params, stack, last, config)).data[0]


def start_cache(model: DialogueModel, source: Sequence[int]) -> DecodeCache:
    """Cache for step 0: every source row and the first target slot computed."""
    framework = model.framework
    layout, mask, read = _step_layout(framework, len(source), 0, model.interval)
    tokens = _step_tokens(framework, layout, source, ())
    dtype = model.params['embeddings.token'].dtype
    hidden = [np.zeros((layout.n, model.config.hidden_size), dtype=dtype) for _ in range(model.config.n_layers + 1)]
    with no_grad():
        cross = None
        if framework.is_encoder_decoder:
            encoded = model.encode(source)
            cross = Tensor(encoded.data[None], dtype=dtype)
        cache = DecodeCache(0, tuple(source), (), layout, tokens, hidden, cross)
        _recompute(model, cache, np.arange(layout.n), mask, read)
    return cache


def advance_cache(model: DialogueModel, cache: DecodeCache, token: int, t: int) -> DecodeCache:
    """
    Extend a cache with generated token y_{t-1} and prepare step t.

    Only the rows named by incremental_update_range are recomputed; every
    other cached row is carried over unchanged. The encoder output of
    encoder-decoder models is shared, never recomputed.

    Args:
        model: Model being decoded
        cache: Cache positioned at step t - 1
        token: Token generated at step t - 1
        t: Step to prepare

    Returns:
        A new cache positioned at step t

    Raises:
        ValueError: If the cache is not positioned at step t - 1
    """
    if cache.step != t - 1 or len(cache.prefix) != t - 1:
        raise ValueError(f"cache/prefix mismatch: cache at step {cache.step}, advancing to {t}")
    framework = model.framework
    prefix = cache.prefix + (int(token),)
    layout, mask, read = _step_layout(framework, len(cache.source), t, model.interval)
    tokens = _step_tokens(framework, layout, cache.source, prefix)

    grown = layout.n - cache.layout.n
    hidden = [np.concatenate([h, np.zeros((grown, h.shape[1]), dtype=h.dtype)]) for h in cache.hidden]
    updated = DecodeCache(t, cache.source, prefix, layout, tokens, hidden, cache.cross_context)
    rows = _rows_for(framework, layout, incremental_update_range(framework, t, model.interval), t)
    with no_grad():
        _recompute(model, updated, rows, mask, read)
    return updated


# Scorers


class Scorer(Protocol):
    def start(self, source: Sequence[int]) -> Any: ...

    def log_probs(self, state: Any) -> np.ndarray: ...

    def advance(self, state: Any, token: int) -> Any: ...


class IncrementalScorer:
    """Scores from the per-layer cache, updating only the framework's update range."""

    def __init__(self, model: DialogueModel):
        self.model = model

    def start(self, source: Sequence[int]) -> DecodeCache:
        return start_cache(self.model, source)

    def log_probs(self, state: DecodeCache) -> np.ndarray:
        return log_softmax(state.logits.astype(np.float64))

    def advance(self, state: DecodeCache, token: int) -> DecodeCache:
        return advance_cache(self.model, state, token, state.step + 1)


@dataclass(frozen=True)
class _ReferenceState:
    source: Tuple[int, ...]
    prefix: Tuple[int, ...] = ()


class ReferenceScorer:
    """Rebuilds the layout and recomputes every hidden state at every step."""

    def __init__(self, model: DialogueModel):
        self.model = model

    def start(self, source: Sequence[int]) -> _ReferenceState:
        return _ReferenceState(tuple(source))

    def log_probs(self, state: _ReferenceState) -> np.ndarray:
        return log_softmax(reference_logits(self.model, state.source, state.prefix).astype(np.float64))

    def advance(self, state: _ReferenceState, token: int) -> _ReferenceState:
        return replace(state, prefix=state.prefix + (int(token),))


def step_scores(model: DialogueModel, hypothesis: Hypothesis, t: int) -> np.ndarray:
    """
    Normalized log-probabilities over the vocabulary for target index t.

    Raises:
        ValueError: If the hypothesis cache is not positioned at step t
    """
    cache = hypothesis.state
    if not isinstance(cache, DecodeCache) or cache.step != t:
        raise ValueError(f"hypothesis cache is not positioned at step {t}")
    return IncrementalScorer(model).log_probs(cache)


# Search


def apply_constraints(scores: np.ndarray, hypothesis: Hypothesis, params: DecodeParams) -> np.ndarray:
    """
    Block repeated unigrams, reserved tokens and an early [EOS].

    [EOS] and punctuation (params.exempt_ids) may repeat; [PAD], [UNK], [BOS],
    [SEP] and [MASK] are never generated.

    Raises:
        ConstraintExhaustedError: If every token ends up blocked
    """
    adjusted = np.array(scores, dtype=np.float64)
    blocked = {tok for tok in hypothesis.tokens if tok != EOS_ID and tok not in params.exempt_ids}
    blocked |= NEVER_GENERATED
    if hypothesis.length < params.min_len:
        blocked.add(EOS_ID)
    adjusted[[tok for tok in blocked if tok < len(adjusted)]] = -np.inf
    if not np.isfinite(adjusted).any():
        raise ConstraintExhaustedError(
            f"constraint exhaustion: no admissible token after {hypothesis.length} tokens "
            f"(vocabulary of {len(adjusted)} must exceed max_len)"
        )
    return adjusted


def _final_key(hyp: Hypothesis):
    return (-hyp.score, len(hyp.tokens), hyp.tokens)


def beam_search(
    model: Optional[DialogueModel],
    source: Sequence[int],
    params: DecodeParams,
    scorer: Optional[Scorer] = None,
) -> Hypothesis:
    """
    Beam search over cumulative log-probability, without length normalization.

    max_len counts response tokens; a hypothesis that reaches it gets one
    more step in which only [EOS] is admissible.

    Args:
        model: Model to decode with (unused when a scorer is given)
        source: Source token ids
        params: Decode settings
        scorer: Scoring backend; incremental cache by default

    Returns:
        The best finished hypothesis (ties: shorter, then lexicographic); the
        best live one with finished=False if none could take [EOS]
    """
    scorer = scorer or IncrementalScorer(model)
    max_len = params.max_len
    if model is not None:
        max_len = step_capacity(params.framework, len(source), params.max_len + 1) - 1
        if max_len < 1:
            raise ValueError(f"source of {len(source)} tokens leaves no room to generate")
        if max_len < params.max_len:
            logger.warning(f"max_len capped at {max_len} to fit the {MAX_INPUT_LENGTH}-token input limit")

    live = [Hypothesis(state=scorer.start(source))]
    finished: List[Hypothesis] = []
    for t in range(max_len + 1):
        candidates = []
        for hyp in live:
            log_probs = scorer.log_probs(hyp.state)
            if t == max_len:
                adjusted = np.full(len(log_probs), -np.inf)
                adjusted[EOS_ID] = log_probs[EOS_ID]
            else:
                adjusted = apply_constraints(log_probs, hyp, params)
            allowed = np.flatnonzero(np.isfinite(adjusted))
            best = sorted(allowed, key=lambda tok: (-log_probs[tok], tok))[:params.beam_size + 1]
            for tok in best:
                candidates.append((hyp.score + float(log_probs[tok]), hyp.tokens + (int(tok),), hyp, float(log_probs[tok])))
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1]))

        next_live = []
        for rank, (score, tokens, parent, step_lp) in enumerate(candidates):
            steps = parent.step_log_probs + (step_lp,)
            if tokens[-1] == EOS_ID:
                if rank < params.beam_size:
                    finished.append(Hypothesis(tokens, score, True, None, steps))
                continue
            if len(next_live) < params.beam_size:
                state = scorer.advance(parent.state, tokens[-1])
                next_live.append(Hypothesis(tokens, score, False, state, steps))
        live = next_live

        if finished and (not live or max(h.score for h in finished) >= max(h.score for h in live)):
            break
        if not live:
            break

    if finished:
        return min(finished, key=_final_key)
    logger.warning(f"no hypothesis could finish within {max_len} tokens; returning the best live one")
    return min(live, key=_final_key)


def reference_decode(model: DialogueModel, source: Sequence[int], params: DecodeParams) -> Hypothesis:
    """Beam search with full recomputation at every step; the oracle for the cached decoder."""
    return beam_search(model, source, params, ReferenceScorer(model))


def generate_responses(
    model: DialogueModel,
    sources: Sequence[Sequence[int]],
    params: DecodeParams,
    workers: int = 1,
) -> List[Hypothesis]:
    """Decode many sources, in input order."""
    if workers <= 1:
        return [beam_search(model, source, params) for source in sources]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda source: beam_search(model, source, params), sources))


@dataclass
class Calibration:
    min_len: int
    target_avg_len: float
    avg_len_by_min_len: Dict[int, float] = field(default_factory=dict)


def calibrate_min_len(
    model: DialogueModel,
    sources: Sequence[Sequence[int]],
    references: Sequence[Sequence[int]],
    params: DecodeParams,
    candidates: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> Calibration:
    """
    Pick the min_len whose average generated length is closest to the references'.

    Ties go to the smaller min_len.
    """
    if not sources or len(sources) != len(references):
        raise ValueError("calibration needs aligned, nonempty sources and references")
    target = float(np.mean([len(ref) for ref in references]))
    candidates = list(candidates or range(1, min(params.max_len, math.ceil(target) + 3) + 1))
    lengths = {}
    for min_len in candidates:
        decoded = generate_responses(model, sources, replace(params, min_len=min_len), workers)
        lengths[min_len] = float(np.mean([hyp.length for hyp in decoded]))
        logger.info(f"min_len {min_len}: avgLen {lengths[min_len]:.2f} (target {target:.2f})")
    best = min(candidates, key=lambda m: (abs(lengths[m] - target), m))
    return Calibration(best, target, lengths)


def fg_discrepancy(
    model: DialogueModel,
    source: Sequence[int],
    prefix: Sequence[int],
    continuation: Sequence[int] = (),
    extra_masked: Optional[Sequence[int]] = None,
) -> float:
    """
    Max-abs logit gap between training-time and inference-time predictions of y_t.

    The training-time input holds the whole target prefix ++ [y_t] ++
    continuation under the framework's training corruption; the inference
    context is the decoder's state after generating the prefix. For the
    masked-target frameworks extra_masked lists further corrupted prefix
    indices (default: the one just before t).

    Returns:
        max |training logits - inference logits| at target index t = len(prefix)
    """
    framework = model.framework
    t = len(prefix)
    inference = reference_logits(model, source, prefix)
    target = list(prefix) + [EOS_ID] + list(continuation)
    n_slots = len(target) + 1

    with no_grad():
        if framework.is_dual_stream:
            layout = build_layout(framework, len(source), n_slots, open_tail=True)
            boundary = step_boundary(t, model.interval) if framework.uses_interval else 0
            mask = build_framework_mask(layout, boundary=boundary, interval=model.interval)
            tokens = _step_tokens(framework, layout, source, target)
            training = model.logits(layout, tokens, mask)[layout.position_of(Stream.MASK, t)]
        elif framework.traits.objective is Objective.MLM:
            masked = {t} | set(extra_masked if extra_masked is not None else ([t - 1] if t > 0 else []))
            layout = build_layout(framework, len(source), n_slots)
            if framework is Framework.PF_FREE:
                mask = build_pf_interval_mask(layout, model.interval, step_boundary(t, model.interval))
            else:
                mask = build_framework_mask(layout)
            slots = [MASK_ID if i in masked else tok for i, tok in enumerate(target + [EOS_ID])]
            training = model.logits(layout, list(source) + slots, mask)[len(source) + t]
        else:
            full_layout, mask, _ = _step_layout(framework, len(source), n_slots - 1, model.interval)
            tokens = _step_tokens(framework, full_layout, source, target)
            cross = model.encode(source) if framework.is_encoder_decoder else None
            read = t if framework.is_encoder_decoder else len(source) + t
            training = model.logits(full_layout, tokens, mask, cross)[read]
    return float(np.max(np.abs(training - inference)))
