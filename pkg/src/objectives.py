"""Training objectives and example construction for every framework."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .layout import (
    AttentionMask, EncoderDecoderLayout, Framework, MaskedSet, Objective, SequenceLayout, Stream,
    build_framework_mask, build_layout, build_lm_layout, build_pf_interval_mask, causal_mask, full_mask,
    pad_layout,
)
from .numcore import Tensor, cross_entropy
from .transformer import ModelConfig, ParameterSet, encode_batch, forward_batch
from .utils import BOS_ID, EOS_ID, MASK_ID, PAD_ID, SPECIAL_TOKENS

logger = logging.getLogger(__name__)

PRETRAIN_MASK_RATE = 0.15


@dataclass(frozen=True)
class ObjectiveSettings:
    """Corruption and sampling knobs shared by the fine-tuning objectives."""

    mask_rate: float = 0.4
    interval: int = 5
    fg_coverage: float = 1.0


@dataclass
class TrainingExample:
    """One input sequence with its attention mask and supervised positions."""

    framework: Optional[Framework]
    layout: SequenceLayout
    input_ids: np.ndarray
    loss_positions: np.ndarray
    gold_ids: np.ndarray
    mask: AttentionMask
    encoder_layout: Optional[SequenceLayout] = None
    encoder_ids: Optional[np.ndarray] = None
    boundary: int = 0
    masked: MaskedSet = field(default_factory=frozenset)

    def __post_init__(self):
        self.input_ids = np.asarray(self.input_ids, dtype=np.int64)
        self.loss_positions = np.asarray(self.loss_positions, dtype=np.int64)
        self.gold_ids = np.asarray(self.gold_ids, dtype=np.int64)
        if len(self.loss_positions) == 0:
            raise ValueError("training example has no loss positions")
        if len(self.loss_positions) != len(self.gold_ids):
            raise ValueError("every loss position needs exactly one gold token")
        if len(self.input_ids) != self.layout.n:
            raise ValueError(f"input has {len(self.input_ids)} tokens for a layout of length {self.layout.n}")


def _sample_masked(length: int, rate: float, rng: np.random.Generator, offset: int = 0) -> MaskedSet:
    """Independent Bernoulli(rate) selection with at least one position forced."""
    if not 0 < rate <= 1:
        raise ValueError(f"mask rate must lie in (0, 1], got {rate}")
    chosen = np.flatnonzero(rng.random(length) < rate)
    if len(chosen) == 0:
        chosen = np.array([rng.integers(length)])
    return frozenset(int(offset + i) for i in chosen)


def mlm_corrupt_target(
    target: Sequence[int],
    rate: float,
    rng: np.random.Generator,
) -> Tuple[List[int], MaskedSet]:
    """
    Replace each target token by [MASK] with probability `rate`.

    Args:
        target: Target token ids
        rate: Masking probability in (0, 1]
        rng: Random generator

    Returns:
        Tuple of (corrupted target, masked indices); at least one index is masked
    """
    masked = _sample_masked(len(target), rate, rng)
    return [MASK_ID if i in masked else tok for i, tok in enumerate(target)], masked


def pf_sample_pattern(
    target_len: int,
    interval: int,
    rate: float,
    rng: np.random.Generator,
) -> Tuple[int, MaskedSet]:
    """
    Draw a PF-free attention pattern and its masked positions.

    The boundary is uniform over {0, k, 2k, ...} below target_len; positions
    below it are bidirectional context and are never masked.

    Returns:
        Tuple of (boundary, masked indices at or after the boundary)
    """
    if interval < 1:
        raise ValueError(f"attention interval must be at least 1, got {interval}")
    boundaries = range(0, target_len, interval)
    boundary = boundaries[int(rng.integers(len(boundaries)))]
    return boundary, _sample_masked(target_len - boundary, rate, rng, offset=boundary)


def _sequence_example(
    framework: Framework,
    source: Sequence[int],
    target_slots: Sequence[int],
    loss_indices: Sequence[int],
    gold: Sequence[int],
    mask_fn=None,
    masked: MaskedSet = frozenset(),
    boundary: int = 0,
) -> TrainingExample:
    layout = build_layout(framework, len(source), len(target_slots))
    mask = mask_fn(layout) if mask_fn is not None else build_framework_mask(layout)
    offset = len(source)
    return TrainingExample(
        framework=framework,
        layout=layout,
        input_ids=list(source) + list(target_slots),
        loss_positions=[offset + i for i in loss_indices],
        gold_ids=[gold[i] for i in loss_indices],
        mask=mask,
        boundary=boundary,
        masked=masked,
    )


def ar_example(
    source: Sequence[int],
    target: Sequence[int],
    framework: Framework = Framework.AR,
) -> TrainingExample:
    """
    Teacher-forced next-token example: input x ++ [BOS] ++ y, gold y ++ [EOS].

    Args:
        source: Source token ids
        target: Target token ids
        framework: ED, Dec or AR

    Returns:
        TrainingExample with T + 1 loss positions
    """
    framework = Framework.parse(framework)
    if framework.traits.objective is not Objective.AR:
        raise ValueError(f"{framework.value} is not trained auto-regressively")
    inputs = [BOS_ID] + list(target)
    gold = list(target) + [EOS_ID]
    steps = list(range(len(gold)))

    if framework.is_encoder_decoder:
        layout: EncoderDecoderLayout = build_layout(framework, len(source), len(inputs))
        masks = build_framework_mask(layout)
        return TrainingExample(
            framework=framework,
            layout=layout.decoder,
            input_ids=inputs,
            loss_positions=steps,
            gold_ids=gold,
            mask=masks.decoder,
            encoder_layout=layout.encoder,
            encoder_ids=np.asarray(source, dtype=np.int64),
        )
    return _sequence_example(framework, source, inputs, steps, gold)


def mlm_example(
    source: Sequence[int],
    target: Sequence[int],
    rate: float,
    rng: np.random.Generator,
) -> TrainingExample:
    """Masked-target example: loss only where the target (plus [EOS]) was masked."""
    slots = list(target) + [EOS_ID]
    corrupted, masked = mlm_corrupt_target(slots, rate, rng)
    return _sequence_example(Framework.MLM, source, corrupted, sorted(masked), slots, masked=masked)


def pf_example(
    source: Sequence[int],
    target: Sequence[int],
    interval: int,
    rate: float,
    rng: np.random.Generator,
) -> TrainingExample:
    """PF-free example: sampled bidirectional boundary, masks only to its right."""
    slots = list(target) + [EOS_ID]
    boundary, masked = pf_sample_pattern(len(slots), interval, rate, rng)
    corrupted = [MASK_ID if i in masked else tok for i, tok in enumerate(slots)]
    return _sequence_example(
        Framework.PF_FREE, source, corrupted, sorted(masked), slots,
        mask_fn=lambda layout: build_pf_interval_mask(layout, interval, boundary),
        masked=masked, boundary=boundary,
    )


def fg_example(
    source: Sequence[int],
    target: Sequence[int],
    coverage: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    framework: Framework = Framework.FG_FREE,
    interval: Optional[int] = None,
) -> TrainingExample:
    """
    Dual-stream example: intact target tokens plus one [MASK] slot per index.

    Every mask slot m_i shares the position embedding of y_i and sees only the
    source, y_<i and itself. Loss is taken at mask slots (all of them by
    default; a sampled subset when coverage < 1). For PFFG-free a boundary is
    drawn as in PF-free and only mask slots at or after it carry loss.

    Args:
        source: Source token ids
        target: Target token ids
        coverage: Fraction of mask slots carrying loss
        rng: Random generator (required for coverage < 1 and PFFG-free)
        framework: FG-free or PFFG-free
        interval: Attention interval (PFFG-free only)

    Returns:
        TrainingExample
    """
    framework = Framework.parse(framework)
    if not framework.is_dual_stream:
        raise ValueError(f"{framework.value} does not use a mask stream")
    gold = list(target) + [EOS_ID]
    n_indices = len(gold)
    layout = build_layout(framework, len(source), n_indices, open_tail=True)

    boundary = 0
    if framework.uses_interval:
        if rng is None or interval is None:
            raise ValueError("PFFG-free examples need an interval and a random generator")
        boundaries = range(0, n_indices, interval)
        boundary = boundaries[int(rng.integers(len(boundaries)))]
    if coverage >= 1.0:
        loss_indices = frozenset(range(boundary, n_indices))
    else:
        if rng is None:
            raise ValueError("sampled mask-stream coverage needs a random generator")
        loss_indices = _sample_masked(n_indices - boundary, coverage, rng, offset=boundary)

    tokens = []
    for slot in layout.slots:
        if slot.stream is Stream.SOURCE:
            tokens.append(source[slot.index])
        elif slot.stream is Stream.MASK:
            tokens.append(MASK_ID)
        else:
            tokens.append(target[slot.index])
    ordered = sorted(loss_indices)
    return TrainingExample(
        framework=framework,
        layout=layout,
        input_ids=tokens,
        loss_positions=[layout.position_of(Stream.MASK, i) for i in ordered],
        gold_ids=[gold[i] for i in ordered],
        mask=build_framework_mask(layout, boundary=boundary, interval=interval or 1),
        boundary=boundary,
        masked=loss_indices,
    )


def make_example(
    framework: Framework,
    source: Sequence[int],
    target: Sequence[int],
    rng: np.random.Generator,
    settings: ObjectiveSettings = ObjectiveSettings(),
) -> TrainingExample:
    """Build a fine-tuning example with the framework's own objective."""
    framework = Framework.parse(framework)
    if framework in (Framework.ED, Framework.DEC, Framework.AR):
        return ar_example(source, target, framework)
    if framework is Framework.MLM:
        return mlm_example(source, target, settings.mask_rate, rng)
    if framework is Framework.PF_FREE:
        return pf_example(source, target, settings.interval, settings.mask_rate, rng)
    return fg_example(source, target, settings.fg_coverage, rng, framework, settings.interval)


def lm_example(
    sentence: Sequence[int],
    objective: Objective,
    rng: np.random.Generator,
    vocab_size: int,
) -> TrainingExample:
    """
    Pretraining example on raw text.

    AR: input [BOS] ++ s under a causal mask, next-token loss everywhere.
    MLM: input s ++ [EOS] under an all-allow mask, 15% of positions selected;
    selected tokens become [MASK] 80% of the time, a random word 10%, unchanged 10%.
    """
    objective = Objective(objective)
    if objective is Objective.AR:
        inputs = [BOS_ID] + list(sentence)
        gold = list(sentence) + [EOS_ID]
        layout = build_lm_layout(len(inputs))
        return TrainingExample(None, layout, inputs, list(range(len(gold))), gold, causal_mask(layout))

    original = list(sentence) + [EOS_ID]
    selected = sorted(_sample_masked(len(original), PRETRAIN_MASK_RATE, rng))
    corrupted = list(original)
    for i in selected:
        roll = rng.random()
        if roll < 0.8:
            corrupted[i] = MASK_ID
        elif roll < 0.9:
            corrupted[i] = int(rng.integers(len(SPECIAL_TOKENS), vocab_size))
    layout = build_lm_layout(len(corrupted))
    return TrainingExample(
        None, layout, corrupted, selected, [original[i] for i in selected], full_mask(layout),
        masked=frozenset(selected),
    )


@dataclass
class Batch:
    """Padded arrays for a homogeneous list of examples."""

    framework: Optional[Framework]
    token_ids: np.ndarray
    position_ids: np.ndarray
    type_ids: np.ndarray
    allow: np.ndarray
    loss_rows: np.ndarray
    loss_positions: np.ndarray
    gold_ids: np.ndarray
    encoder_token_ids: Optional[np.ndarray] = None
    encoder_position_ids: Optional[np.ndarray] = None
    encoder_type_ids: Optional[np.ndarray] = None
    encoder_allow: Optional[np.ndarray] = None
    cross_allow: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def loss_count(self) -> int:
        return len(self.gold_ids)


def _padded_allow(allow: np.ndarray, rows: int, cols: int, square: bool) -> np.ndarray:
    """Embed an allow-matrix in a padded one; padding rows get a dummy column."""
    out = np.zeros((rows, cols), dtype=bool)
    out[:allow.shape[0], :allow.shape[1]] = allow
    empty = np.flatnonzero(~out.any(axis=1))
    out[empty, empty if square else 0] = True
    return out


def _pad_sequence(layouts: List[SequenceLayout], ids: List[np.ndarray], masks: List[np.ndarray]):
    n = max(layout.n for layout in layouts)
    padded = [pad_layout(layout, n) for layout in layouts]
    token_ids = np.full((len(ids), n), PAD_ID, dtype=np.int64)
    for row, seq in enumerate(ids):
        token_ids[row, :len(seq)] = seq
    position_ids = np.stack([layout.position_ids for layout in padded])
    type_ids = np.stack([layout.type_ids for layout in padded])
    allow = np.stack([_padded_allow(mask, n, n, square=True) for mask in masks])
    return token_ids, position_ids, type_ids, allow


def collate(examples: Sequence[TrainingExample]) -> Batch:
    """
    Pad examples to the longest member.

    Padding slots attend to nothing but themselves, are attended by nothing,
    and carry no loss.

    Raises:
        ValueError: On an empty or mixed-framework batch
    """
    if not examples:
        raise ValueError("cannot collate an empty batch")
    frameworks = {ex.framework for ex in examples}
    if len(frameworks) != 1:
        raise ValueError(f"batch mixes frameworks: {sorted(str(f) for f in frameworks)}")

    token_ids, position_ids, type_ids, allow = _pad_sequence(
        [ex.layout for ex in examples], [ex.input_ids for ex in examples], [ex.mask.allow for ex in examples]
    )
    loss_rows = np.concatenate([np.full(len(ex.loss_positions), row) for row, ex in enumerate(examples)])
    batch = Batch(
        framework=examples[0].framework,
        token_ids=token_ids,
        position_ids=position_ids,
        type_ids=type_ids,
        allow=allow,
        loss_rows=loss_rows.astype(np.int64),
        loss_positions=np.concatenate([ex.loss_positions for ex in examples]),
        gold_ids=np.concatenate([ex.gold_ids for ex in examples]),
    )

    if examples[0].encoder_layout is not None:
        enc_layouts = [ex.encoder_layout for ex in examples]
        enc_ids = [ex.encoder_ids for ex in examples]
        enc_masks = [np.ones((len(seq), len(seq)), dtype=bool) for seq in enc_ids]
        (batch.encoder_token_ids, batch.encoder_position_ids,
         batch.encoder_type_ids, batch.encoder_allow) = _pad_sequence(enc_layouts, enc_ids, enc_masks)
        n, s = token_ids.shape[1], batch.encoder_token_ids.shape[1]
        batch.cross_allow = np.stack([
            _padded_allow(np.ones((ex.layout.n, len(ex.encoder_ids)), dtype=bool), n, s, square=False)
            for ex in examples
        ])
    return batch


def batch_logits(batch: Batch, params: ParameterSet, config: ModelConfig) -> Tensor:
    """Logits (B, n, vocab) for a collated batch."""
    cross_context = None
    if batch.encoder_token_ids is not None:
        cross_context = encode_batch(config, params, batch.encoder_token_ids, batch.encoder_position_ids,
                                     batch.encoder_type_ids, batch.encoder_allow)
    return forward_batch(config, params, batch.token_ids, batch.position_ids, batch.type_ids, batch.allow,
                         cross_context, batch.cross_allow)


def batch_loss(
    examples: Sequence[TrainingExample],
    params: ParameterSet,
    config: ModelConfig,
) -> Tensor:
    """
    Mean cross-entropy over every loss position of the batch.

    Raises:
        ValueError: On an empty or mixed-framework batch
    """
    return collated_loss(collate(examples), params, config)


def collated_loss(batch: Batch, params: ParameterSet, config: ModelConfig) -> Tensor:
    logits = batch_logits(batch, params, config)
    return cross_entropy(logits[batch.loss_rows, batch.loss_positions], batch.gold_ids)
