"""Batched training loop shared by pretraining and fine-tuning."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional

from .numcore import NonFiniteLossError, OptimizerState, adam_step, clip_grad_norm
from .objectives import Batch, collated_loss
from .transformer import ModelConfig, ParameterSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainerSettings:
    """Optimisation schedule."""

    steps: int = 2000
    lr: float = 1e-3
    warmup_steps: int = 100
    clip_norm: float = 1.0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.warmup_steps < 0 or self.log_every < 1:
            raise ValueError("warmup_steps must be >= 0 and log_every >= 1")


@dataclass
class TrainingResult:
    steps: int = 0
    losses: List[float] = field(default_factory=list)
    interrupted: bool = False

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


class Trainer:
    """Adam with linear warmup and global-norm clipping over a batch stream."""

    def __init__(
        self,
        config: ModelConfig,
        params: ParameterSet,
        settings: TrainerSettings,
        state: Optional[OptimizerState] = None,
    ):
        """
        Initialize a trainer.

        Args:
            config: Model configuration
            params: Parameters, updated in place
            settings: Optimisation schedule
            state: Optimizer state to resume from
        """
        self.config = config
        self.params = params
        self.settings = settings
        self.state = state or OptimizerState(lr=settings.lr)

    def learning_rate(self, step: int) -> float:
        """Rate for a zero-based step: linear ramp over warmup, then constant."""
        warmup = self.settings.warmup_steps
        if warmup and step < warmup:
            return self.settings.lr * (step + 1) / warmup
        return self.settings.lr

    def train_step(self, batch: Batch) -> float:
        """
        One forward/backward/update on a collated batch.

        Returns:
            The batch loss before the update

        Raises:
            NonFiniteLossError: If the loss is NaN or infinite
        """
        step = self.state.step
        self.params.zero_grad()
        loss = collated_loss(batch, self.params, self.config)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss became {value} at step {step}")
        loss.backward()
        grads = {name: tensor.grad for name, tensor in self.params.items()}
        clip_grad_norm(grads, self.settings.clip_norm)
        adam_step(self.params, grads, self.state, lr=self.learning_rate(step))
        return value

    def fit(
        self,
        batches: Iterator[Batch],
        should_shutdown: Optional[Callable[[], bool]] = None,
    ) -> TrainingResult:
        """
        Train for settings.steps batches.

        Args:
            batches: Batch stream (at least settings.steps long)
            should_shutdown: Optional callback polled between steps

        Returns:
            TrainingResult with per-step losses
        """
        result = TrainingResult()
        for step in range(self.settings.steps):
            if should_shutdown and should_shutdown():
                logger.warning(f"Shutdown requested, stopping after {step} steps")
                result.interrupted = True
                break
            try:
                batch = next(batches)
            except StopIteration:
                logger.warning(f"Batch stream ended after {step} steps")
                break
            loss = self.train_step(batch)
            result.losses.append(loss)
            result.steps += 1
            if step % self.settings.log_every == 0 or step == self.settings.steps - 1:
                logger.info(f"step {step} loss {loss:.4f}")
        return result
