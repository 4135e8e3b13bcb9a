"""Transformer blocks with masked multi-head attention for Dialogue Lab."""

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .layout import AttentionMask, SequenceLayout
from .numcore import Tensor, gelu, layer_norm, masked_softmax
from .utils import MAX_INPUT_LENGTH, SPECIAL_TOKENS

logger = logging.getLogger(__name__)

DECODER_ONLY, ENCODER_DECODER = 'decoder-only', 'encoder-decoder'
BLOCKS, ENCODER, DECODER = 'blocks', 'encoder', 'decoder'


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters."""

    n_layers: int = 2
    n_heads: int = 4
    hidden_size: int = 64
    vocab_size: int = 64
    max_positions: int = MAX_INPUT_LENGTH
    type_count: int = 2
    tie_output_embedding: bool = True
    ffn_multiplier: int = 4
    init_std: float = 0.02
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def ffn_size(self) -> int:
        return self.ffn_multiplier * self.hidden_size

    def validate(self) -> None:
        """
        Raises:
            ValueError: If the configuration is inconsistent
        """
        if self.n_layers < 0 or self.n_heads < 1 or self.hidden_size < 1:
            raise ValueError("n_layers must be >= 0 and n_heads, hidden_size >= 1")
        if self.hidden_size % self.n_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size < len(SPECIAL_TOKENS) + 1:
            raise ValueError(f"vocab_size must be at least {len(SPECIAL_TOKENS) + 1}")
        if self.max_positions < 1 or self.type_count < 1 or self.init_std <= 0:
            raise ValueError("max_positions, type_count and init_std must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'ModelConfig':
        kinds = {f.name: f.type for f in fields(cls)}
        parsed = {}
        for key, value in values.items():
            if key not in kinds:
                raise ValueError(f"Unknown model configuration key: {key}")
            if isinstance(value, str):
                if kinds[key] in (bool, 'bool'):
                    value = value.strip().lower() in ('1', 'true', 'yes')
                elif kinds[key] in (float, 'float'):
                    value = float(value)
                else:
                    value = int(value)
            parsed[key] = value
        return cls(**parsed)


class ParameterSet(dict):
    """Named parameter tensors of one model."""

    def count(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.items()}

    def zero_grad(self) -> None:
        for tensor in self.values():
            tensor.zero_grad()

    def astype(self, dtype: Union[str, np.dtype]) -> 'ParameterSet':
        """Copy with every tensor cast to dtype (e.g. float64 for verification)."""
        return ParameterSet(
            (name, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=name, dtype=dtype))
            for name, t in self.items()
        )


def _block_shapes(config: ModelConfig, prefix: str, cross: bool) -> Dict[str, Tuple[int, ...]]:
    d, f = config.hidden_size, config.ffn_size
    shapes: Dict[str, Tuple[int, ...]] = {}
    sublayers = ['attn'] + (['cross'] if cross else [])
    for name in sublayers:
        shapes[f'{prefix}.{name}_norm.gamma'] = (d,)
        shapes[f'{prefix}.{name}_norm.beta'] = (d,)
        for proj in ('query', 'key', 'value', 'output'):
            shapes[f'{prefix}.{name}.{proj}.weight'] = (d, d)
            shapes[f'{prefix}.{name}.{proj}.bias'] = (d,)
    shapes[f'{prefix}.ffn_norm.gamma'] = (d,)
    shapes[f'{prefix}.ffn_norm.beta'] = (d,)
    shapes[f'{prefix}.ffn.inner.weight'] = (d, f)
    shapes[f'{prefix}.ffn.inner.bias'] = (f,)
    shapes[f'{prefix}.ffn.outer.weight'] = (f, d)
    shapes[f'{prefix}.ffn.outer.bias'] = (d,)
    return shapes


def parameter_shapes(config: ModelConfig, architecture: str = DECODER_ONLY) -> Dict[str, Tuple[int, ...]]:
    """
    Shapes of every parameter, in initialisation order.

    Args:
        config: Model configuration
        architecture: 'decoder-only' or 'encoder-decoder'

    Returns:
        Ordered mapping of parameter name to shape
    """
    d = config.hidden_size
    shapes: Dict[str, Tuple[int, ...]] = {
        'embeddings.token': (config.vocab_size, d),
        'embeddings.position': (config.max_positions, d),
        'embeddings.type': (config.type_count, d),
    }
    if architecture == DECODER_ONLY:
        stacks = [(BLOCKS, False)]
    elif architecture == ENCODER_DECODER:
        stacks = [(ENCODER, False), (DECODER, True)]
    else:
        raise ValueError(f"Unknown architecture: {architecture}")
    for stack, cross in stacks:
        for i in range(config.n_layers):
            shapes.update(_block_shapes(config, f'{stack}.{i}', cross))
        shapes[f'{stack}.final_norm.gamma'] = (d,)
        shapes[f'{stack}.final_norm.beta'] = (d,)
    if not config.tie_output_embedding:
        shapes['lm_head.weight'] = (config.vocab_size, d)
    shapes['lm_head.bias'] = (config.vocab_size,)
    return shapes


def output_stack(params: ParameterSet) -> str:
    """Stack feeding the LM head: 'decoder' for encoder-decoder models, else 'blocks'."""
    return DECODER if f'{DECODER}.final_norm.gamma' in params else BLOCKS


def _linear(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return x @ params[f'{prefix}.weight'] + params[f'{prefix}.bias']


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    batch, length, width = x.shape
    return x.reshape(batch, length, n_heads, width // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, size = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, length, heads * size)


def _as_allow(mask: Union[AttentionMask, np.ndarray]) -> np.ndarray:
    return mask.softmax_allow() if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)


def _attend(
    queries_from: Tensor,
    keys_from: Tensor,
    allow: np.ndarray,
    params: ParameterSet,
    prefix: str,
    n_heads: int,
) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + M) V per head, heads concatenated and projected."""
    q = _split_heads(_linear(queries_from, params, f'{prefix}.query'), n_heads)
    k = _split_heads(_linear(keys_from, params, f'{prefix}.key'), n_heads)
    v = _split_heads(_linear(keys_from, params, f'{prefix}.value'), n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(q.shape[-1]))
    if allow.ndim == 2:
        allow = allow[None]
    weights = masked_softmax(scores, allow[:, None, :, :])
    return _linear(_merge_heads(weights @ v), params, f'{prefix}.output')


def attention_sublayer(
    hidden: Tensor,
    mask: Union[AttentionMask, np.ndarray],
    params: ParameterSet,
    prefix: str,
    n_heads: int,
    context: Optional[Tensor] = None,
) -> Tensor:
    """
    Masked multi-head attention over a sequence (n x d) or batch (B x n x d).

    Args:
        hidden: Query-side hidden states
        mask: Allow-matrix; rows are queries, columns keys
        params: Parameters holding `{prefix}.query/key/value/output`
        prefix: Parameter prefix of the sub-layer
        n_heads: Number of heads
        context: Key/value source for cross-attention; defaults to hidden

    Returns:
        Attention output with the shape of hidden
    """
    single = hidden.ndim == 2
    if single:
        hidden = hidden.reshape(1, *hidden.shape)
        context = context.reshape(1, *context.shape) if context is not None else None
    allow = _as_allow(mask)
    keys_from = hidden if context is None else context
    if allow.shape[-2:] != (hidden.shape[1], keys_from.shape[1]):
        raise ValueError(f"mask shape {allow.shape} does not match {hidden.shape[1]} queries x {keys_from.shape[1]} keys")
    out = _attend(hidden, keys_from, allow, params, prefix, n_heads)
    return out.reshape(*out.shape[1:]) if single else out


def transformer_block(
    x: Tensor,
    allow: np.ndarray,
    params: ParameterSet,
    prefix: str,
    config: ModelConfig,
    query_rows: Optional[np.ndarray] = None,
    cross_context: Optional[Tensor] = None,
    cross_allow: Optional[np.ndarray] = None,
) -> Tensor:
    """
    One pre-norm block: self-attention, optional cross-attention, feed-forward.

    Args:
        x: Block input (B, n, d)
        allow: Self-attention allow-matrix (B, n, n) or (n, n)
        params: Model parameters
        prefix: Block prefix, e.g. 'blocks.0'
        config: Model configuration
        query_rows: Positions whose outputs are computed; all when None
        cross_context: Encoder outputs (B, S, d) for encoder-decoder decoders
        cross_allow: Decoder-to-encoder allow-matrix (B, n, S)

    Returns:
        Block output for the query rows (B, len(query_rows), d)
    """
    eps = config.layer_norm_eps
    normed = layer_norm(x, params[f'{prefix}.attn_norm.gamma'], params[f'{prefix}.attn_norm.beta'], eps)
    if query_rows is None:
        residual, queries, rows_allow = x, normed, allow
    else:
        residual, queries = x[:, query_rows], normed[:, query_rows]
        rows_allow = allow[..., query_rows, :]
    y = residual + _attend(queries, normed, rows_allow, params, f'{prefix}.attn', config.n_heads)

    if cross_context is not None:
        if cross_allow is None:
            raise ValueError("cross-attention requires a decoder-to-encoder mask")
        if cross_context.shape[-1] != config.hidden_size:
            raise ValueError(f"cross context width {cross_context.shape[-1]} does not match hidden size")
        c_allow = cross_allow if query_rows is None else cross_allow[..., query_rows, :]
        c_normed = layer_norm(y, params[f'{prefix}.cross_norm.gamma'], params[f'{prefix}.cross_norm.beta'], eps)
        y = y + _attend(c_normed, cross_context, c_allow, params, f'{prefix}.cross', config.n_heads)

    f_normed = layer_norm(y, params[f'{prefix}.ffn_norm.gamma'], params[f'{prefix}.ffn_norm.beta'], eps)
    return y + _linear(gelu(_linear(f_normed, params, f'{prefix}.ffn.inner')), params, f'{prefix}.ffn.outer')


def embed(
    params: ParameterSet,
    token_ids: np.ndarray,
    position_ids: np.ndarray,
    type_ids: np.ndarray,
) -> Tensor:
    """
    Sum of token, position and type embeddings.

    Raises:
        ValueError: On unknown token ids or out-of-range positions
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    vocab_size = params['embeddings.token'].shape[0]
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= vocab_size):
        raise ValueError(f"unknown token id in input (vocabulary size {vocab_size})")
    position_ids = np.asarray(position_ids, dtype=np.int64)
    if position_ids.size and position_ids.max() >= params['embeddings.position'].shape[0]:
        raise ValueError("position index exceeds the position embedding table")
    return (
        params['embeddings.token'][token_ids]
        + params['embeddings.position'][position_ids]
        + params['embeddings.type'][np.asarray(type_ids, dtype=np.int64)]
    )


def embed_input(params: ParameterSet, layout: SequenceLayout, tokens: Sequence[int]) -> Tensor:
    """H^0 (n x d) for one layout."""
    if len(tokens) != layout.n:
        raise ValueError(f"expected {layout.n} tokens for the layout, got {len(tokens)}")
    return embed(params, np.asarray(tokens), layout.position_ids, layout.type_ids)


def final_norm(params: ParameterSet, stack: str, hidden: Tensor, config: ModelConfig) -> Tensor:
    return layer_norm(hidden, params[f'{stack}.final_norm.gamma'], params[f'{stack}.final_norm.beta'], config.layer_norm_eps)


def lm_head(params: ParameterSet, hidden: Tensor) -> Tensor:
    """Vocabulary logits from final-normed hidden states."""
    weight = params.get('lm_head.weight', params['embeddings.token'])
    return hidden @ weight.transpose(1, 0) + params['lm_head.bias']


def run_stack(
    config: ModelConfig,
    params: ParameterSet,
    stack: str,
    hidden: Tensor,
    allow: np.ndarray,
    cross_context: Optional[Tensor] = None,
    cross_allow: Optional[np.ndarray] = None,
) -> Tensor:
    """Apply every block of a stack and its final layer norm."""
    for i in range(config.n_layers):
        hidden = transformer_block(hidden, allow, params, f'{stack}.{i}', config,
                                   cross_context=cross_context, cross_allow=cross_allow)
    return final_norm(params, stack, hidden, config)


def forward_batch(
    config: ModelConfig,
    params: ParameterSet,
    token_ids: np.ndarray,
    position_ids: np.ndarray,
    type_ids: np.ndarray,
    allow: np.ndarray,
    cross_context: Optional[Tensor] = None,
    cross_allow: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Logits (B, n, vocab) for a padded batch.

    Args:
        config: Model configuration
        params: Model parameters
        token_ids, position_ids, type_ids: Integer arrays (B, n)
        allow: Softmax-safe allow-matrices (B, n, n)
        cross_context: Encoder outputs (B, S, d) for encoder-decoder models
        cross_allow: Decoder-to-encoder allow-matrices (B, n, S)
    """
    if allow.shape != token_ids.shape + (token_ids.shape[-1],):
        raise ValueError(f"mask shape {allow.shape} does not match tokens {token_ids.shape}")
    stack = output_stack(params)
    if stack == DECODER and cross_context is None:
        raise ValueError("encoder-decoder decoding requires encoder outputs")
    hidden = embed(params, token_ids, position_ids, type_ids)
    hidden = run_stack(config, params, stack, hidden, allow, cross_context, cross_allow)
    return lm_head(params, hidden)


def encode_batch(
    config: ModelConfig,
    params: ParameterSet,
    token_ids: np.ndarray,
    position_ids: np.ndarray,
    type_ids: np.ndarray,
    allow: np.ndarray,
) -> Tensor:
    """Encoder outputs (B, S, d) of an encoder-decoder model."""
    hidden = embed(params, token_ids, position_ids, type_ids)
    return run_stack(config, params, ENCODER, hidden, allow)


def forward(
    config: ModelConfig,
    params: ParameterSet,
    layout: SequenceLayout,
    tokens: Sequence[int],
    mask: Union[AttentionMask, np.ndarray],
    cross_context: Optional[Tensor] = None,
    cross_mask: Optional[Union[AttentionMask, np.ndarray]] = None,
) -> Tensor:
    """
    Logits (n x vocab) for one layout.

    Args:
        config: Model configuration
        params: Model parameters
        layout: Sequence layout (the decoder layout for encoder-decoder models)
        tokens: Token id per layout position
        mask: Self-attention mask of the layout
        cross_context: Encoder outputs (S x d), encoder-decoder decoders only
        cross_mask: Decoder-to-encoder mask; all-allow when omitted
    """
    if len(tokens) != layout.n:
        raise ValueError(f"expected {layout.n} tokens for the layout, got {len(tokens)}")
    allow = _as_allow(mask)
    if allow.shape != (layout.n, layout.n):
        raise ValueError(f"mask shape {allow.shape} does not match layout length {layout.n}")
    cross_batch, cross_allow = None, None
    if cross_context is not None:
        cross_batch = cross_context.reshape(1, *cross_context.shape)
        cross_allow = (np.ones((layout.n, cross_context.shape[0]), dtype=bool)
                       if cross_mask is None else _as_allow(cross_mask))[None]
    logits = forward_batch(
        config, params,
        np.asarray(tokens)[None], layout.position_ids[None], layout.type_ids[None], allow[None],
        cross_batch, cross_allow,
    )
    return logits.reshape(layout.n, config.vocab_size)


def encode(config: ModelConfig, params: ParameterSet, source_tokens: Sequence[int]) -> Tensor:
    """
    Bidirectional encoding of a source (S x d) for cross-attention.

    Raises:
        ValueError: If the parameters have no encoder stack
    """
    if f'{ENCODER}.final_norm.gamma' not in params:
        raise ValueError("encode requires an encoder-decoder parameter set")
    length = len(source_tokens)
    positions = np.arange(length)
    allow = np.ones((1, length, length), dtype=bool)
    out = encode_batch(config, params, np.asarray(source_tokens)[None], positions[None],
                       np.zeros((1, length), dtype=np.int64), allow)
    return out.reshape(length, config.hidden_size)
