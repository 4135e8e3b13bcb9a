"""Model assembly and the pretrain -> fine-tune pipeline."""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, PretrainTag
from .data import DialogueSample, Vocab, batch_iter, lm_batch_iter
from .layout import Framework, Objective
from .numcore import Tensor
from .objectives import ObjectiveSettings
from .trainer import Trainer, TrainerSettings
from .transformer import (
    BLOCKS, DECODER, DECODER_ONLY, ENCODER, ENCODER_DECODER, ModelConfig, ParameterSet, encode, forward,
    parameter_shapes,
)
from .utils import make_rng

logger = logging.getLogger(__name__)


class LineageError(ValueError):
    """Raised when a framework is fine-tuned from weights of the wrong pretraining lineage."""


def architecture_of(framework: Framework) -> str:
    return ENCODER_DECODER if Framework.parse(framework).is_encoder_decoder else DECODER_ONLY


def init_model(config: ModelConfig, seed: int, architecture: str = DECODER_ONLY) -> ParameterSet:
    """
    Deterministic random initialization.

    Weights ~ N(0, init_std); biases and norm shifts zero; norm gains one.

    Args:
        config: Model configuration
        seed: Random seed
        architecture: 'decoder-only' or 'encoder-decoder'

    Returns:
        ParameterSet with every tensor requiring gradients
    """
    rng = make_rng(seed)
    params = ParameterSet()
    for name, shape in parameter_shapes(config, architecture).items():
        if name.endswith('.gamma'):
            value = np.ones(shape)
        elif name.endswith('.bias') or name.endswith('.beta'):
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, config.init_std, size=shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def count_parameters(params: ParameterSet) -> int:
    return params.count()


@dataclass(frozen=True)
class FinetuneHyper:
    """Fine-tuning hyperparameters."""

    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 100
    steps: int = 2000
    mask_rate: float = 0.4
    interval: int = 5
    fg_coverage: float = 1.0
    force_lineage: bool = False
    subset: Optional[int] = None
    seed: int = 0
    log_every: int = 50

    @property
    def objective_settings(self) -> ObjectiveSettings:
        return ObjectiveSettings(mask_rate=self.mask_rate, interval=self.interval, fg_coverage=self.fg_coverage)

    @property
    def trainer_settings(self) -> TrainerSettings:
        return TrainerSettings(steps=self.steps, lr=self.lr, warmup_steps=self.warmup_steps,
                               log_every=self.log_every)


def _check_vocab(config: ModelConfig, vocab: Vocab) -> None:
    if len(vocab) > config.vocab_size:
        raise ValueError(f"vocabulary of {len(vocab)} tokens does not fit vocab_size {config.vocab_size}")


def pretrain(
    config: ModelConfig,
    sentences: Sequence[str],
    vocab: Vocab,
    objective: Objective,
    steps: int = 2000,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 1e-3,
    warmup_steps: int = 100,
    log_every: int = 50,
    should_shutdown: Optional[Callable[[], bool]] = None,
) -> Checkpoint:
    """
    Pretrain a decoder-only model on raw sentences.

    Args:
        config: Model configuration
        sentences: Raw text, one sentence per item
        vocab: Vocabulary
        objective: 'ar' (causal next-token) or 'mlm' (bidirectional masked tokens)
        steps: Optimizer steps
        seed: Seed for initialization, shuffling and corruption
        batch_size, lr, warmup_steps, log_every: Optimisation schedule
        should_shutdown: Optional callback polled between steps

    Returns:
        Checkpoint tagged with the objective

    Raises:
        ValueError: On an empty corpus or a vocabulary larger than the model's
    """
    objective = Objective(objective)
    if not sentences:
        raise ValueError("pretraining corpus is empty")
    _check_vocab(config, vocab)

    params = init_model(config, seed)
    logger.info(f"Pretraining ({objective.value}) on {len(sentences)} sentences, params {count_parameters(params)}")
    trainer = Trainer(config, params, TrainerSettings(steps, lr, warmup_steps, log_every=log_every))
    result = trainer.fit(lm_batch_iter(sentences, vocab, objective, batch_size, seed), should_shutdown)
    return Checkpoint(
        config=config,
        tag=PretrainTag(objective.value),
        params=params.arrays(),
        step=result.steps,
        seed=seed,
        extra={'interrupted': str(result.interrupted).lower()},
    )


def check_lineage(framework: Framework, init: Checkpoint, force: bool = False) -> None:
    """
    Raises:
        LineageError: If the checkpoint's pretraining objective is not the one the framework builds on
    """
    expected = Framework.parse(framework).traits.expected_init
    if init.tag is PretrainTag.NONE or init.tag.value == expected.value:
        return
    message = (
        f"pretraining lineage mismatch: {Framework.parse(framework).value} expects "
        f"{expected.value}-pretrained weights, checkpoint is {init.tag.value}-pretrained"
    )
    if not force:
        raise LineageError(message)
    logger.warning(f"{message} (overridden)")


def _check_shapes(params: ParameterSet, config: ModelConfig, architecture: str) -> None:
    expected = parameter_shapes(config, architecture)
    actual = {name: tensor.shape for name, tensor in params.items()}
    if actual != expected:
        missing = sorted(set(expected) - set(actual)) + sorted(
            n for n in expected if n in actual and actual[n] != expected[n])
        raise ValueError(f"checkpoint shape mismatch for {architecture} model: {missing[:5]}")


def params_from_checkpoint(init: Checkpoint, framework: Framework, seed: int) -> ParameterSet:
    """
    Initial fine-tuning parameters from a checkpoint.

    A fine-tuned checkpoint of the same framework resumes as is. A pretrained
    (decoder-only) checkpoint is copied; for encoder-decoder models its blocks
    initialize both the encoder and the decoder stacks while cross-attention
    starts fresh. Type embeddings beyond the pretrained segment start from the
    pretrained segment's row.
    """
    framework = Framework.parse(framework)
    architecture = architecture_of(framework)
    if init.framework is not None:
        if init.framework != framework.value:
            raise ValueError(f"checkpoint was fine-tuned for {init.framework}, not {framework.value}")
        params = init.parameter_set()
        _check_shapes(params, init.config, architecture)
        return params

    pretrained = init.parameter_set()
    _check_shapes(pretrained, init.config, DECODER_ONLY)
    if architecture == DECODER_ONLY:
        params = pretrained
    else:
        params = init_model(init.config, seed, ENCODER_DECODER)
        for name in params:
            stack, _, rest = name.partition('.')
            if stack in (ENCODER, DECODER):
                source = f'{BLOCKS}.{rest}'
                if source in pretrained and '.cross' not in rest:
                    params[name].data = pretrained[source].data.copy()
            elif name in pretrained:
                params[name].data = pretrained[name].data.copy()

    types = params['embeddings.type'].data
    types[1:] = types[0]
    return params


def finetune(
    framework: Framework,
    init: Optional[Checkpoint],
    corpus: Sequence[DialogueSample],
    vocab: Vocab,
    hyper: FinetuneHyper = FinetuneHyper(),
    config: Optional[ModelConfig] = None,
    should_shutdown: Optional[Callable[[], bool]] = None,
) -> Checkpoint:
    """
    Fine-tune a framework on dialogue samples.

    Args:
        framework: One of the seven frameworks
        init: Pretrained checkpoint, or None for random initialization
        corpus: Training samples
        vocab: Vocabulary
        hyper: Fine-tuning hyperparameters
        config: Model configuration; required when init is None
        should_shutdown: Optional callback polled between steps

    Returns:
        Checkpoint recording the framework and the init's lineage tag; its step
        continues the init's count when resuming the same framework

    Raises:
        LineageError: On a lineage mismatch without hyper.force_lineage
        ValueError: On shape mismatches or an empty corpus
    """
    framework = Framework.parse(framework)
    resumed_from = 0
    if init is None:
        if config is None:
            raise ValueError("fine-tuning from random initialization requires a model configuration")
        params = init_model(config, hyper.seed, architecture_of(framework))
        tag = PretrainTag.NONE
    else:
        check_lineage(framework, init, hyper.force_lineage)
        config = init.config
        params = params_from_checkpoint(init, framework, hyper.seed)
        tag = init.tag
        if init.framework == framework.value:
            resumed_from = init.step
    _check_vocab(config, vocab)

    samples = list(corpus[:hyper.subset] if hyper.subset else corpus)
    if not samples:
        raise ValueError("fine-tuning corpus is empty")
    logger.info(f"training samples {len(samples)}")
    logger.info(f"params {count_parameters(params)} ({framework.value}, init {tag.value})")

    batches = batch_iter(samples, vocab, framework, hyper.batch_size, hyper.seed, hyper.objective_settings)
    result = Trainer(config, params, hyper.trainer_settings).fit(batches, should_shutdown)
    return Checkpoint(
        config=config,
        tag=tag,
        params=params.arrays(),
        step=resumed_from + result.steps,
        seed=hyper.seed,
        framework=framework.value,
        extra={'interval': str(hyper.interval), 'interrupted': str(result.interrupted).lower()},
    )


class DialogueModel:
    """A fine-tuned model ready for decoding; parameters are never updated."""

    def __init__(self, config: ModelConfig, params: ParameterSet, framework: Framework, interval: int = 5):
        self.config = config
        self.params = params
        self.framework = Framework.parse(framework)
        self.interval = interval
        _check_shapes(params, config, architecture_of(self.framework))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, framework: Optional[Framework] = None) -> 'DialogueModel':
        """
        Raises:
            ValueError: If the checkpoint is not fine-tuned for the requested framework
        """
        if ckpt.framework is None:
            raise ValueError("checkpoint is pretrained only; fine-tune it before generating")
        if framework is not None and Framework.parse(framework).value != ckpt.framework:
            raise ValueError(f"checkpoint was fine-tuned for {ckpt.framework}, not {Framework.parse(framework).value}")
        interval = int(ckpt.extra.get('interval', 5))
        return cls(ckpt.config, ckpt.parameter_set(), Framework.parse(ckpt.framework), interval)

    def astype(self, dtype) -> 'DialogueModel':
        return DialogueModel(self.config, self.params.astype(dtype), self.framework, self.interval)

    def logits(self, layout, tokens, mask, cross_context: Optional[Tensor] = None) -> np.ndarray:
        return forward(self.config, self.params, layout, tokens, mask, cross_context).data

    def encode(self, source: Sequence[int]) -> Tensor:
        return encode(self.config, self.params, source)
