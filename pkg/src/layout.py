"""Sequence layouts and self-attention masks for every dialogue framework."""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from .utils import MAX_INPUT_LENGTH

logger = logging.getLogger(__name__)

SOURCE_TYPE, TARGET_TYPE = 0, 1

MaskedSet = FrozenSet[int]


class Objective(str, Enum):
    """Training objective of a framework or a pretraining run."""

    AR = 'ar'
    MLM = 'mlm'


class Framework(str, Enum):
    """The frameworks compared by the lab, including both corrections."""

    ED = 'ed'
    DEC = 'dec'
    MLM = 'mlm'
    AR = 'ar'
    PF_FREE = 'pf-free'
    FG_FREE = 'fg-free'
    PFFG_FREE = 'pffg-free'

    @classmethod
    def parse(cls, value: Union[str, 'Framework']) -> 'Framework':
        """Accept enum members, values and common spellings ('Dec', 'pf_free')."""
        if isinstance(value, Framework):
            return value
        key = str(value).strip().lower().replace('_', '-')
        for member in cls:
            if key in (member.value, member.name.lower().replace('_', '-')):
                return member
        raise ValueError(f"Unknown framework: {value}. Valid frameworks are: {[m.value for m in cls]}")

    @property
    def traits(self) -> 'FrameworkTraits':
        return FRAMEWORK_TRAITS[self]

    @property
    def is_encoder_decoder(self) -> bool:
        return self is Framework.ED

    @property
    def is_dual_stream(self) -> bool:
        return self in (Framework.FG_FREE, Framework.PFFG_FREE)

    @property
    def uses_interval(self) -> bool:
        return self in (Framework.PF_FREE, Framework.PFFG_FREE)


@dataclass(frozen=True)
class FrameworkTraits:
    """One row of the framework comparison table."""

    pretrained_lm: str
    architecture: str
    source_attention: str
    target_attention: str
    objective: Objective

    @property
    def expected_init(self) -> Objective:
        """Pretraining objective whose checkpoints this framework fine-tunes."""
        return Objective.AR if self.pretrained_lm == 'GPT' else Objective.MLM


FRAMEWORK_TRAITS: Dict[Framework, FrameworkTraits] = {
    Framework.ED: FrameworkTraits('GPT', 'encoder-decoder', 'bi-directional', 'left-to-right', Objective.AR),
    Framework.DEC: FrameworkTraits('GPT', 'decoder-only', 'left-to-right', 'left-to-right', Objective.AR),
    Framework.MLM: FrameworkTraits('BERT', 'decoder-only', 'bi-directional', 'left-to-right', Objective.MLM),
    Framework.AR: FrameworkTraits('BERT', 'decoder-only', 'bi-directional', 'left-to-right', Objective.AR),
    Framework.PF_FREE: FrameworkTraits('BERT', 'decoder-only', 'bi-directional', 'interval bi-directional', Objective.MLM),
    Framework.FG_FREE: FrameworkTraits('BERT', 'decoder-only', 'bi-directional', 'left-to-right (mask stream)', Objective.MLM),
    Framework.PFFG_FREE: FrameworkTraits('BERT', 'decoder-only', 'bi-directional', 'interval bi-directional (mask stream)', Objective.MLM),
}


class Stream(str, Enum):
    """What a sequence position carries."""

    SOURCE = 'source'
    TOKEN = 'target-token'
    MASK = 'target-mask'
    PAD = 'pad'


class Slot(NamedTuple):
    """One position of a layout: stream, position-embedding row, type id, source/target index."""

    stream: Stream
    position_index: int
    type_id: int
    index: int


@dataclass(frozen=True)
class SequenceLayout:
    """Position and type assignment for one concatenated input sequence."""

    framework: Optional[Framework]
    source_len: int
    target_len: int
    slots: Tuple[Slot, ...]

    @property
    def n(self) -> int:
        return len(self.slots)

    @property
    def position_ids(self) -> np.ndarray:
        return np.array([s.position_index for s in self.slots], dtype=np.int64)

    @property
    def type_ids(self) -> np.ndarray:
        return np.array([s.type_id for s in self.slots], dtype=np.int64)

    @property
    def streams(self) -> Tuple[Stream, ...]:
        return tuple(s.stream for s in self.slots)

    @property
    def pad_positions(self) -> np.ndarray:
        return np.array([p for p, s in enumerate(self.slots) if s.stream is Stream.PAD], dtype=np.int64)

    def position_of(self, stream: Stream, index: int) -> int:
        """Physical position of the slot carrying (stream, index)."""
        for p, slot in enumerate(self.slots):
            if slot.stream is stream and slot.index == index:
                return p
        raise KeyError(f"No {stream.value} slot for index {index}")

    def target_positions(self, stream: Stream = Stream.TOKEN) -> List[int]:
        """Physical positions of target slots of one stream, in target order."""
        return [p for p, s in enumerate(self.slots) if s.stream is stream]


@dataclass(frozen=True)
class EncoderDecoderLayout:
    """Separate encoder and decoder layouts of an explicit encoder-decoder."""

    encoder: SequenceLayout
    decoder: SequenceLayout

    @property
    def framework(self) -> Framework:
        return Framework.ED


Layout = Union[SequenceLayout, EncoderDecoderLayout]


class AttentionMask:
    """Boolean allow-matrix: True where attention is permitted (M_ij = 0)."""

    def __init__(self, allow: np.ndarray):
        allow = np.array(allow, dtype=bool)
        if allow.ndim != 2:
            raise ValueError(f"attention mask must be 2-D, got shape {allow.shape}")
        allow.setflags(write=False)
        self.allow = allow

    @property
    def shape(self) -> Tuple[int, int]:
        return self.allow.shape

    @property
    def n(self) -> int:
        return self.allow.shape[0]

    def allowed_columns(self, row: int) -> List[int]:
        return [int(c) for c in np.flatnonzero(self.allow[row])]

    def softmax_allow(self) -> np.ndarray:
        """Allow-matrix with self-attention added on rows that allow nothing (padding)."""
        allow = self.allow.copy()
        if allow.shape[0] == allow.shape[1]:
            empty = ~allow.any(axis=1)
            allow[empty, empty] = True
        return allow

    def to_text(self) -> str:
        """Row-major 0/1 grid, one row per line."""
        return '\n'.join(''.join('1' if v else '0' for v in row) for row in self.allow)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.allow, other.allow)

    def __repr__(self) -> str:
        return f"AttentionMask(shape={self.shape})"


@dataclass(frozen=True)
class EncoderDecoderMasks:
    """Encoder self-mask, decoder self-mask and decoder-to-encoder cross mask."""

    encoder: AttentionMask
    decoder: AttentionMask
    cross: AttentionMask

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, EncoderDecoderMasks)
            and self.encoder == other.encoder
            and self.decoder == other.decoder
            and self.cross == other.cross
        )


Masks = Union[AttentionMask, EncoderDecoderMasks]


def _check_length(n: int, max_length: int) -> None:
    if n > max_length:
        raise ValueError(f"Sequence of length {n} exceeds maximum input length {max_length}")


def build_layout(
    framework: Union[str, Framework],
    source_len: int,
    target_len: int,
    pad_to: Optional[int] = None,
    open_tail: bool = False,
    max_length: int = MAX_INPUT_LENGTH,
) -> Layout:
    """
    Lay out a (source, target) pair for a framework.

    Args:
        framework: Framework to lay out for
        source_len: Number of source slots S
        target_len: Number of target indices T
        pad_to: Optional total length to pad single-stream layouts to
        open_tail: Dual-stream only; the last target index gets a mask slot
            but no token slot (the slot being predicted)
        max_length: Maximum total length

    Returns:
        SequenceLayout, or EncoderDecoderLayout for ED

    Raises:
        ValueError: On empty spans or when the layout exceeds max_length
    """
    framework = Framework.parse(framework)
    if source_len < 1 or target_len < 1:
        raise ValueError(f"source and target lengths must be positive, got S={source_len}, T={target_len}")

    if framework.is_encoder_decoder:
        if pad_to is not None:
            raise ValueError("Pad encoder and decoder layouts separately with pad_layout")
        _check_length(source_len, max_length)
        _check_length(target_len, max_length)
        encoder = SequenceLayout(
            framework, source_len, 0,
            tuple(Slot(Stream.SOURCE, j, SOURCE_TYPE, j) for j in range(source_len)),
        )
        decoder = SequenceLayout(
            framework, 0, target_len,
            tuple(Slot(Stream.TOKEN, i, TARGET_TYPE, i) for i in range(target_len)),
        )
        return EncoderDecoderLayout(encoder, decoder)

    slots = [Slot(Stream.SOURCE, j, SOURCE_TYPE, j) for j in range(source_len)]
    if framework.is_dual_stream:
        for i in range(target_len):
            slots.append(Slot(Stream.MASK, source_len + i, TARGET_TYPE, i))
            if not (open_tail and i == target_len - 1):
                slots.append(Slot(Stream.TOKEN, source_len + i, TARGET_TYPE, i))
    else:
        slots.extend(Slot(Stream.TOKEN, source_len + i, TARGET_TYPE, i) for i in range(target_len))

    _check_length(len(slots), max_length)
    layout = SequenceLayout(framework, source_len, target_len, tuple(slots))
    return pad_layout(layout, pad_to) if pad_to is not None else layout


def build_lm_layout(length: int, max_length: int = MAX_INPUT_LENGTH) -> SequenceLayout:
    """Single-segment layout used by language-model pretraining."""
    if length < 1:
        raise ValueError("pretraining sequences must not be empty")
    _check_length(length, max_length)
    return SequenceLayout(None, length, 0, tuple(Slot(Stream.SOURCE, j, SOURCE_TYPE, j) for j in range(length)))


def pad_layout(layout: SequenceLayout, n: int) -> SequenceLayout:
    """Append padding slots up to total length n."""
    if n < layout.n:
        raise ValueError(f"Cannot pad a layout of length {layout.n} down to {n}")
    _check_length(n, MAX_INPUT_LENGTH)
    pads = tuple(Slot(Stream.PAD, 0, SOURCE_TYPE, k) for k in range(n - layout.n))
    return SequenceLayout(layout.framework, layout.source_len, layout.target_len, layout.slots + pads)


def step_boundary(t: int, interval: int) -> int:
    """Bidirectional boundary in force while generating target index t."""
    return (t // interval) * interval


def _check_boundary(layout: SequenceLayout, interval: int, boundary: int) -> None:
    if interval < 1:
        raise ValueError(f"attention interval must be at least 1, got {interval}")
    if boundary % interval != 0 or not 0 <= boundary <= layout.target_len:
        raise ValueError(
            f"boundary {boundary} must be a multiple of interval {interval} within [0, {layout.target_len}]"
        )


def _slot_arrays(layout: SequenceLayout) -> Tuple[np.ndarray, np.ndarray]:
    streams = np.array([s.stream.value for s in layout.slots])
    index = np.array([s.index for s in layout.slots])
    return streams, index


def _single_stream_mask(layout: SequenceLayout, framework: Framework, boundary: int) -> np.ndarray:
    streams, index = _slot_arrays(layout)
    real = streams != Stream.PAD.value
    source = streams == Stream.SOURCE.value
    token = streams == Stream.TOKEN.value
    mask_slot = streams == Stream.MASK.value

    if framework is Framework.DEC:
        positions = np.arange(layout.n)
        return (positions[None, :] <= positions[:, None]) & real[:, None] & real[None, :]

    row_i, col_j = index[:, None], index[None, :]
    visible = (col_j <= row_i) | ((row_i < boundary) & (col_j < boundary))
    allow = source[:, None] & source[None, :]
    allow |= token[:, None] & source[None, :]
    allow |= token[:, None] & token[None, :] & visible
    if framework.is_dual_stream:
        allow |= mask_slot[:, None] & source[None, :]
        allow |= mask_slot[:, None] & token[None, :] & (col_j < row_i)
        allow |= np.diag(mask_slot)
    return allow


def build_framework_mask(
    layout: Layout,
    framework: Optional[Union[str, Framework]] = None,
    boundary: int = 0,
    interval: int = 1,
) -> Masks:
    """
    Build the allow-matrix M of a framework for a layout.

    Args:
        layout: Layout produced by build_layout for the same framework
        framework: Framework; defaults to the layout's
        boundary: PF-free/PFFG-free bidirectional boundary b (target indices < b
            are mutually visible); 0 gives plain left-to-right targets
        interval: Attention interval k; b must be a multiple of it

    Returns:
        AttentionMask, or EncoderDecoderMasks for ED

    Raises:
        ValueError: On a framework/layout mismatch or an invalid boundary
    """
    framework = Framework.parse(framework) if framework is not None else layout.framework
    if framework is not layout.framework:
        raise ValueError(f"framework/layout mismatch: {framework.value} mask for a {layout.framework} layout")

    if isinstance(layout, EncoderDecoderLayout):
        encoder, decoder = layout.encoder, layout.decoder
        enc_real = np.array([s.stream is not Stream.PAD for s in encoder.slots])
        dec_real = np.array([s.stream is not Stream.PAD for s in decoder.slots])
        steps = np.arange(decoder.n)
        causal = (steps[None, :] <= steps[:, None]) & dec_real[:, None] & dec_real[None, :]
        return EncoderDecoderMasks(
            encoder=AttentionMask(enc_real[:, None] & enc_real[None, :]),
            decoder=AttentionMask(causal),
            cross=AttentionMask(dec_real[:, None] & enc_real[None, :]),
        )

    if boundary and not framework.uses_interval:
        raise ValueError(f"{framework.value} has no bidirectional target boundary")
    if framework.uses_interval:
        _check_boundary(layout, interval, boundary)
    return AttentionMask(_single_stream_mask(layout, framework, boundary))


def build_pf_interval_mask(layout: SequenceLayout, interval: int, boundary: int) -> AttentionMask:
    """
    Mask with bidirectional attention over target indices below a boundary.

    Target indices i < b attend to the source and every target index < b;
    indices i >= b attend left-to-right. b = 0 gives the plain MLM/AR mask.

    Args:
        layout: Single- or dual-stream layout (not Dec, not ED)
        interval: Attention interval k >= 1
        boundary: Boundary b, a multiple of k with 0 <= b <= T

    Returns:
        AttentionMask
    """
    if isinstance(layout, EncoderDecoderLayout) or layout.framework in (None, Framework.DEC):
        raise ValueError("interval masks apply to source-bidirectional decoder-only layouts")
    _check_boundary(layout, interval, boundary)
    return AttentionMask(_single_stream_mask(layout, layout.framework, boundary))


def causal_mask(layout: SequenceLayout) -> AttentionMask:
    """Left-to-right mask over every non-padding position."""
    real = np.array([s.stream is not Stream.PAD for s in layout.slots])
    positions = np.arange(layout.n)
    return AttentionMask((positions[None, :] <= positions[:, None]) & real[:, None] & real[None, :])


def full_mask(layout: SequenceLayout) -> AttentionMask:
    """All-allow mask over every non-padding position."""
    real = np.array([s.stream is not Stream.PAD for s in layout.slots])
    return AttentionMask(real[:, None] & real[None, :])


def detect_mask_conflict(
    masked: Iterable[int],
    target_len: int,
    attention: str = 'bidirectional',
) -> List[Tuple[int, int]]:
    """
    Find masked target pairs that cannot share one mask matrix.

    Predicting y_i under whole-prefix bidirectional attention requires rows
    <= i to see every column <= i and nothing beyond i. Two predictions
    conflict when they place opposite requirements on the same cell.

    Args:
        masked: Target indices replaced by [MASK]
        target_len: Target length T
        attention: 'bidirectional' (whole generated prefix) or 'left-to-right'

    Returns:
        Sorted list of conflicting pairs (i, j) with i < j
    """
    masked = sorted(set(masked))
    if any(not 0 <= i < target_len for i in masked):
        raise ValueError(f"masked positions {masked} must lie in [0, {target_len})")
    if attention not in ('bidirectional', 'left-to-right'):
        raise ValueError(f"Unknown target attention: {attention}")

    def requirements(i: int) -> Dict[Tuple[int, int], bool]:
        if attention == 'left-to-right':
            return {(r, c): c <= r for r in range(i + 1) for c in range(target_len)}
        return {(r, c): c <= i for r in range(i + 1) for c in range(target_len)}

    required = {i: requirements(i) for i in masked}
    conflicts = []
    for i, j in itertools.combinations(masked, 2):
        shared = required[i].keys() & required[j].keys()
        if any(required[i][cell] != required[j][cell] for cell in shared):
            conflicts.append((i, j))
    return conflicts


def incremental_update_range(
    framework: Union[str, Framework],
    t: int,
    interval: Optional[int] = None,
) -> Tuple[int, ...]:
    """
    Target indices whose hidden states must be (re)computed at decoding step t.

    Args:
        framework: Decoding framework
        t: Step, i.e. the target index being generated
        interval: Attention interval k (PF-free/PFFG-free only)

    Returns:
        Sorted tuple of target indices
    """
    framework = Framework.parse(framework)
    if t < 0:
        raise ValueError(f"decoding step must be non-negative, got {t}")
    if framework.is_encoder_decoder or t == 0:
        return (t,)
    if framework.uses_interval:
        if interval is None or interval < 1:
            raise ValueError(f"{framework.value} requires an attention interval >= 1")
        if t % interval == 0:
            return tuple(range(t + 1))
    return (t - 1, t)


def mask_rule_oracle(framework: Union[str, Framework], layout: Layout, boundary: int = 0) -> Masks:
    """
    Evaluate 'may position p see position q' pair by pair from the framework rules.

    Independent of build_framework_mask; used to cross-check it.
    """
    framework = Framework.parse(framework)

    if isinstance(layout, EncoderDecoderLayout):
        enc, dec = layout.encoder.slots, layout.decoder.slots

        def real(slot: Slot) -> bool:
            return slot.stream is not Stream.PAD

        encoder = [[real(a) and real(b) for b in enc] for a in enc]
        decoder = [[real(a) and real(b) and q <= p for q, b in enumerate(dec)] for p, a in enumerate(dec)]
        cross = [[real(a) and real(b) for b in enc] for a in dec]
        return EncoderDecoderMasks(AttentionMask(encoder), AttentionMask(decoder), AttentionMask(cross))

    def may_attend(p: int, q: int) -> bool:
        a, b = layout.slots[p], layout.slots[q]
        if a.stream is Stream.PAD or b.stream is Stream.PAD:
            return False
        if framework is Framework.DEC:
            return q <= p
        if a.stream is Stream.SOURCE:
            return b.stream is Stream.SOURCE
        if b.stream is Stream.SOURCE:
            return True
        if a.stream is Stream.MASK:
            if b.stream is Stream.MASK:
                return p == q
            return b.index < a.index
        if b.stream is Stream.MASK:
            return False
        in_block = a.index < boundary and b.index < boundary
        return b.index <= a.index or in_block

    return AttentionMask([[may_attend(p, q) for q in range(layout.n)] for p in range(layout.n)])
