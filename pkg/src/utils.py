"""Utility functions for Dialogue Lab."""

import logging
import os
from typing import Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Special tokens occupy fixed ids in every vocabulary.
PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, SEP_TOKEN, MASK_TOKEN = (
    '[PAD]', '[UNK]', '[BOS]', '[EOS]', '[SEP]', '[MASK]'
)
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, SEP_TOKEN, MASK_TOKEN)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID, MASK_ID = range(len(SPECIAL_TOKENS))

MAX_INPUT_LENGTH = 128

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVEL_ENV = 'DLAB_LOG_LEVEL'


def configure_logging(level: Optional[str] = None) -> None:
    """
    Configure root logging for command-line runs.

    Args:
        level: Level name; defaults to $DLAB_LOG_LEVEL, then INFO
    """
    name = (level or os.environ.get(LOG_LEVEL_ENV, 'INFO')).upper()
    if not isinstance(logging.getLevelName(name), int):
        logger.warning(f"Unknown log level {name!r}, using INFO")
        name = 'INFO'
    logging.basicConfig(level=getattr(logging, name), format=LOG_FORMAT, force=True)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Create a deterministic generator for a (seed, worker, step, ...) stream.

    Args:
        seed: Run seed
        stream: Further non-negative integers identifying the stream

    Returns:
        A numpy Generator independent of every other stream
    """
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])


def batched(items: Sequence, batch_size: int) -> Iterable[List]:
    """
    Split items into consecutive batches.

    Args:
        items: Items to batch
        batch_size: Size of each batch

    Returns:
        Iterator of batches
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    for i in range(0, len(items), batch_size):
        yield list(items[i:i + batch_size])
