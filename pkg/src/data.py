"""Vocabulary, corpus files, synthetic tasks and training batch streams."""

import logging
import os
import string
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .layout import Framework, Objective, build_layout
from .objectives import Batch, ObjectiveSettings, TrainingExample, collate, lm_example, make_example
from .utils import (
    BOS_ID, EOS_ID, MAX_INPUT_LENGTH, PAD_ID, SEP_ID, SEP_TOKEN, SPECIAL_TOKENS, UNK_ID, batched, make_rng,
)

logger = logging.getLogger(__name__)

TURN_SEPARATOR = f' {SEP_TOKEN} '
SYNTH_TASKS = ('echo', 'reverse', 'templated-qa', 'grammar-lm')

SHUFFLE_STREAM = 1
EXAMPLE_STREAM = 2


class Vocab:
    """Token/id bijection with the special tokens at fixed ids."""

    def __init__(self, tokens: Sequence[str], min_freq: int = 1):
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens in id order")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.id_to_token: List[str] = list(tokens)
        self.token_to_id: Dict[str, int] = {tok: i for i, tok in enumerate(tokens)}
        self.min_freq = min_freq

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    @property
    def punctuation_ids(self) -> frozenset:
        """Ids of words made only of punctuation characters."""
        return frozenset(
            i for i, tok in enumerate(self.id_to_token)
            if i >= len(SPECIAL_TOKENS) and all(ch in string.punctuation for ch in tok)
        )

    def save(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write('\n'.join(self.id_to_token) + '\n')
        logger.info(f"Saved vocabulary of {len(self)} tokens to {path}")

    @classmethod
    def load(cls, path: str) -> 'Vocab':
        """
        Read a vocabulary file (one token per line in id order).

        Raises:
            FileNotFoundError: If the file does not exist
        """
        if not os.path.exists(path):
            raise FileNotFoundError(f"Vocabulary file not found at {path}")
        with open(path, 'r', encoding='utf-8') as f:
            return cls([line.rstrip('\n') for line in f if line.rstrip('\n')])


@dataclass(frozen=True)
class DialogueSample:
    history: Tuple[str, ...]
    response: str

    def __post_init__(self):
        if not self.history or any(not turn.strip() for turn in self.history):
            raise ValueError("a dialogue sample needs at least one nonempty history turn")
        if not self.response.strip():
            raise ValueError("a dialogue sample needs a nonempty response")

    @property
    def last_turn(self) -> str:
        return self.history[-1]

    def to_line(self) -> str:
        return TURN_SEPARATOR.join(self.history) + '\t' + self.response


@dataclass(frozen=True)
class LengthLimits:
    """Token-count bounds applied when loading a corpus."""

    max_history: int = 72
    min_response: int = 1
    max_response: int = 36

    def admits(self, history_len: int, response_len: int) -> bool:
        # The dual-stream layout of a (history, response) pair is the longest of all frameworks.
        return (
            1 <= history_len <= self.max_history
            and self.min_response <= response_len <= self.max_response
            and history_len + 2 * response_len + 1 <= MAX_INPUT_LENGTH
        )


def _words(text: str) -> List[str]:
    return [word if word in SPECIAL_TOKENS else word.lower() for word in text.split()]


def _corpus_texts(corpus: Iterable[Union[str, DialogueSample]]) -> Iterator[str]:
    for item in corpus:
        if isinstance(item, DialogueSample):
            yield from item.history
            yield item.response
        else:
            yield item


def build_vocab(corpus: Iterable[Union[str, DialogueSample]], min_freq: int = 1) -> Vocab:
    """
    Build a vocabulary: specials first, then words by descending frequency.

    Args:
        corpus: Text lines or dialogue samples
        min_freq: Words seen fewer times are left out (tokenized as [UNK])

    Returns:
        Vocab with ties broken lexicographically

    Raises:
        ValueError: If the corpus is empty
    """
    counts = Counter(
        word for text in _corpus_texts(corpus) for word in _words(text) if word not in SPECIAL_TOKENS
    )
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    logger.info(f"Vocabulary: {len(kept)} words kept of {len(counts)} (min_freq={min_freq})")
    return Vocab(list(SPECIAL_TOKENS) + kept, min_freq=min_freq)


def tokenize(text: str, vocab: Vocab) -> List[int]:
    """Lowercase whitespace tokenization; unknown words map to [UNK]."""
    return [vocab.token_to_id.get(word, UNK_ID) for word in _words(text)]


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    """Join tokens with single spaces, dropping [PAD], [BOS] and [EOS]."""
    return ' '.join(vocab.id_to_token[int(i)] for i in ids if int(i) not in (PAD_ID, BOS_ID, EOS_ID))


def encode_history(history: Sequence[str], vocab: Vocab) -> List[int]:
    """Source ids: turns tokenized and joined by [SEP]."""
    ids: List[int] = []
    for k, turn in enumerate(history):
        if k:
            ids.append(SEP_ID)
        ids.extend(tokenize(turn, vocab))
    return ids


def encode_sample(sample: DialogueSample, vocab: Vocab) -> Tuple[List[int], List[int]]:
    return encode_history(sample.history, vocab), tokenize(sample.response, vocab)


def parse_line(line: str) -> DialogueSample:
    """
    Parse one corpus line: history turns joined by [SEP], a TAB, the response.

    Raises:
        ValueError: If the line is malformed
    """
    fields = line.rstrip('\n').split('\t')
    if len(fields) != 2:
        raise ValueError(f"expected exactly one TAB, found {len(fields) - 1}")
    history, response = fields
    turns = tuple(turn.strip() for turn in history.split(SEP_TOKEN))
    return DialogueSample(turns, response.strip())


def load_corpus(
    path: str,
    vocab: Optional[Vocab] = None,
    limits: LengthLimits = LengthLimits(),
) -> List[DialogueSample]:
    """
    Load a dialogue corpus, skipping malformed and out-of-bounds lines.

    Args:
        path: Corpus file (UTF-8, one sample per line)
        vocab: Measure lengths in vocabulary tokens; whitespace words when None
        limits: Length bounds

    Returns:
        List of DialogueSample in file order

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If no line is valid
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Corpus file not found at {path}")

    samples: List[DialogueSample] = []
    malformed = too_long = 0
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                sample = parse_line(line)
            except ValueError as e:
                logger.debug(f"{path}:{line_no}: {e}")
                malformed += 1
                continue
            if vocab is not None:
                source, target = encode_sample(sample, vocab)
                lengths = len(source), len(target)
            else:
                lengths = len(_words(TURN_SEPARATOR.join(sample.history))), len(_words(sample.response))
            if not limits.admits(*lengths):
                too_long += 1
                continue
            samples.append(sample)

    if malformed or too_long:
        logger.warning(f"Skipped {malformed} malformed and {too_long} out-of-bounds lines in {path}")
    if not samples:
        raise ValueError(f"No valid dialogue samples in {path}")
    logger.info(f"Loaded {len(samples)} samples from {path}")
    return samples


def load_sentences(path: str) -> List[str]:
    """
    Pretraining text: one sentence per line.

    Dialogue lines are accepted too; each of their turns and the response
    becomes a sentence.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Corpus file not found at {path}")
    sentences = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            for part in line.rstrip('\n').replace('\t', TURN_SEPARATOR).split(SEP_TOKEN):
                if part.strip():
                    sentences.append(part.strip())
    if not sentences:
        raise ValueError(f"No sentences in {path}")
    return sentences


def write_lines(lines: Iterable[str], path: str) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for line in lines:
            f.write(line + '\n')


# Fixed probabilistic grammar: 30 productions, sentences of 2 to 8 words.
GRAMMAR: Dict[str, List[Tuple[Tuple[str, ...], float]]] = {
    'S': [(('NP', 'VP'), 1.0)],
    'NP': [(('DET', 'N'), 0.5), (('DET', 'ADJ', 'N'), 0.3), (('PRON',), 0.2)],
    'VP': [(('V', 'NP'), 0.5), (('V', 'PP'), 0.3), (('V',), 0.2)],
    'PP': [(('P', 'NP'), 1.0)],
    'DET': [(('the',), 0.5), (('a',), 0.3), (('every',), 0.2)],
    'ADJ': [(('small',), 0.25), (('red',), 0.25), (('old',), 0.25), (('happy',), 0.25)],
    'N': [((w,), 1 / 6) for w in ('cat', 'dog', 'bird', 'child', 'tree', 'river')],
    'PRON': [(('she',), 0.5), (('they',), 0.5)],
    'V': [((w,), 0.25) for w in ('sees', 'likes', 'finds', 'follows')],
    'P': [((w,), 1 / 3) for w in ('near', 'under', 'with')],
}


def grammar_terminals() -> List[str]:
    """Every word the grammar can emit, in a fixed order."""
    return [rhs[0] for lhs, rules in GRAMMAR.items() for rhs, _ in rules if rhs[0] not in GRAMMAR]


def sample_sentence(rng: np.random.Generator, symbol: str = 'S') -> List[str]:
    if symbol not in GRAMMAR:
        return [symbol]
    rules = GRAMMAR[symbol]
    rhs = rules[rng.choice(len(rules), p=[p for _, p in rules])][0]
    return [word for part in rhs for word in sample_sentence(rng, part)]


def _distinct_words(rng: np.random.Generator, words: List[str], low: int, high: int) -> List[str]:
    size = int(rng.integers(low, high + 1))
    return [words[i] for i in rng.choice(len(words), size=size, replace=False)]


def _turn_task(rng: np.random.Generator, words: List[str], reverse: bool) -> str:
    turns = [' '.join(_distinct_words(rng, words, 2, 6)) for _ in range(int(rng.integers(1, 3)))]
    last = turns[-1].split()
    response = last[::-1] if reverse else last
    return DialogueSample(tuple(turns), ' '.join(response)).to_line()


def _qa_line(rng: np.random.Generator) -> str:
    x, y = (int(v) for v in rng.choice(np.arange(1, 21), size=2, replace=False))
    return DialogueSample((f'what is {x} plus {y}',), f'{x} plus {y} is {x + y}').to_line()


def synth_generate(task: str, size: int, seed: int, path: Optional[str] = None) -> List[str]:
    """
    Generate a synthetic corpus deterministically.

    echo and reverse: one or two history turns of distinct grammar words; the
    response is the last turn (reversed for reverse). templated-qa:
    "what is X plus Y" -> "X plus Y is Z" with distinct X, Y in [1, 20].
    grammar-lm: one grammar sentence per line.

    Args:
        task: One of echo, reverse, templated-qa, grammar-lm
        size: Number of lines
        seed: Random seed
        path: Write the corpus here when given

    Returns:
        The corpus lines

    Raises:
        ValueError: On an unknown task or size < 1
    """
    if task not in SYNTH_TASKS:
        raise ValueError(f"Unknown synthetic task {task!r}; choose from {', '.join(SYNTH_TASKS)}")
    if size < 1:
        raise ValueError("synthetic corpus size must be at least 1")

    rng = make_rng(seed, SYNTH_TASKS.index(task))
    words = grammar_terminals()
    generators: Dict[str, Callable[[], str]] = {
        'echo': lambda: _turn_task(rng, words, reverse=False),
        'reverse': lambda: _turn_task(rng, words, reverse=True),
        'templated-qa': lambda: _qa_line(rng),
        'grammar-lm': lambda: ' '.join(sample_sentence(rng)),
    }
    lines = [generators[task]() for _ in range(size)]
    if path:
        write_lines(lines, path)
        logger.info(f"Wrote {size} {task} lines to {path}")
    return lines


def fits_framework(framework: Framework, source_len: int, target_len: int) -> bool:
    """Whether a (source, target) pair can be laid out for training."""
    framework = Framework.parse(framework)
    try:
        build_layout(framework, source_len, target_len + 1, open_tail=framework.is_dual_stream)
    except ValueError:
        return False
    return True


def _stream(
    items: List,
    build: Callable[[object, np.random.Generator], TrainingExample],
    batch_size: int,
    seed: int,
    epochs: Optional[int],
) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    epoch = step = 0
    while epochs is None or epoch < epochs:
        order = make_rng(seed, SHUFFLE_STREAM, epoch).permutation(len(items))
        for chunk in batched(order, batch_size):
            rng = make_rng(seed, EXAMPLE_STREAM, 0, step)
            yield collate([build(items[i], rng) for i in chunk])
            step += 1
        epoch += 1


def batch_iter(
    corpus: Sequence[DialogueSample],
    vocab: Vocab,
    framework: Framework,
    batch_size: int,
    seed: int,
    settings: ObjectiveSettings = ObjectiveSettings(),
    epochs: Optional[int] = None,
) -> Iterator[Batch]:
    """
    Stream padded fine-tuning batches, reshuffled every epoch.

    Args:
        corpus: Dialogue samples
        vocab: Vocabulary
        framework: Framework whose objective builds the examples
        batch_size: Samples per batch
        seed: Shuffle and corruption seed
        settings: Objective knobs (mask rate, interval, mask-stream coverage)
        epochs: Stop after this many epochs; endless when None

    Returns:
        Iterator of collated batches

    Raises:
        ValueError: If no sample fits the input length limit
    """
    framework = Framework.parse(framework)
    pairs = [encode_sample(sample, vocab) for sample in corpus]
    usable = [(src, tgt) for src, tgt in pairs if src and fits_framework(framework, len(src), len(tgt))]
    if len(usable) < len(pairs):
        logger.warning(f"Skipped {len(pairs) - len(usable)} samples exceeding {MAX_INPUT_LENGTH} tokens")
    if not usable:
        raise ValueError("no training sample fits the input length limit")
    return _stream(usable, lambda pair, rng: make_example(framework, pair[0], pair[1], rng, settings),
                   batch_size, seed, epochs)


def lm_batch_iter(
    sentences: Sequence[str],
    vocab: Vocab,
    objective: Objective,
    batch_size: int,
    seed: int,
    epochs: Optional[int] = None,
) -> Iterator[Batch]:
    """Stream padded pretraining batches of raw sentences."""
    objective = Objective(objective)
    encoded = [ids for ids in (tokenize(s, vocab) for s in sentences) if 1 <= len(ids) < MAX_INPUT_LENGTH]
    if len(encoded) < len(sentences):
        logger.warning(f"Skipped {len(sentences) - len(encoded)} empty or overlong sentences")
    if not encoded:
        raise ValueError("pretraining corpus has no usable sentence")
    return _stream(encoded, lambda ids, rng: lm_example(ids, objective, rng, len(vocab)),
                   batch_size, seed, epochs)
