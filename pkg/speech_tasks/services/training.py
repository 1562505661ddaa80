"""
Shared training machinery: learning-rate schedule, Adam updates with
finite-loss checks, early stopping and the step -> batch schedule.
"""

import logging
import math
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

import torch

from models.config import TrainConfig
from models.enums import Modality
from models.errors import DataError, NonFiniteLoss
from models.utterance import Utterance
from services.corpus import plan_batches
from services.seeding import derive_seed
from services.structured_log import TrainingLog

logger = logging.getLogger('speechtext.training')

T = TypeVar("T")


def lr_schedule(step: int, lr: float, warmup: int) -> float:
    """Linear warm-up to `lr` over `warmup` updates, then inverse-sqrt decay. Steps count from 1."""
    step = max(step, 1)
    return lr * min(step / warmup, math.sqrt(warmup / step))


def check_finite(terms: Dict[str, torch.Tensor], step: Optional[int] = None) -> None:
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            logger.error(f"Non-finite loss term {name} at step {step}",
                         extra={"event": {"term": name, "step": step}})
            raise NonFiniteLoss(name, step)


def seed_step(root: int, purpose: str, step: int) -> None:
    """Seed the global torch RNG (dropout) for one update."""
    torch.manual_seed(derive_seed(root, purpose, step))


class Trainer:
    """
    Purpose: single writer of a model's parameters.

    Owns the Adam optimizer and the update counter. With `freeze` set the
    model stays in eval mode and no parameter or buffer ever changes.
    """

    def __init__(self, model: torch.nn.Module, cfg: TrainConfig, purpose: str,
                 parameters: Optional[Iterable[torch.nn.Parameter]] = None, start_step: int = 0):
        self.model = model
        self.cfg = cfg
        self.purpose = purpose
        self.step = start_step
        params = [p for p in (parameters if parameters is not None else model.parameters()) if p.requires_grad]
        self.optimizer = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                                          eps=cfg.adam_eps)

    def begin(self) -> int:
        """Prepare the next update: mode, RNG; returns its 1-based step number."""
        next_step = self.step + 1
        if self.cfg.freeze:
            self.model.eval()
        else:
            self.model.train()
        seed_step(self.cfg.seed, self.purpose, next_step)
        return next_step

    def update(self, total: torch.Tensor, terms: Optional[Dict[str, torch.Tensor]] = None) -> float:
        """Backpropagate `total` and apply one scheduled Adam step. Returns the lr used."""
        self.step += 1
        check_finite({**(terms or {}), "total": total}, self.step)
        lr = lr_schedule(self.step, self.cfg.lr, self.cfg.warmup_updates)
        self.optimizer.zero_grad(set_to_none=True)
        if self.cfg.freeze:
            return 0.0
        if total.requires_grad:
            total.backward()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        return lr


class EarlyStopper:
    """Stops when validation loss has not improved for `patience` evaluations."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_evals = 0
        self.history: List[float] = []

    @property
    def enabled(self) -> bool:
        return self.patience > 0

    def observe(self, val_loss: float) -> bool:
        self.history.append(val_loss)
        if val_loss < self.best:
            self.best = val_loss
            self.bad_evals = 0
        else:
            self.bad_evals += 1
        return self.enabled and self.bad_evals >= self.patience


def batch_for_step(plans: Sequence[T], step: int) -> T:
    """The batch consumed by a 1-based update number when cycling a plan."""
    return plans[(step - 1) % len(plans)]


def epoch_of(step: int, n_batches: int) -> int:
    return (step - 1) // n_batches


class BatchSchedule:
    """
    Maps 1-based update numbers to utterance groups. Batch order is
    re-shuffled at every epoch boundary; only the current epoch's plan is kept.
    """

    def __init__(self, utts: Sequence[Utterance], modality: Modality, budget: int, seed: int,
                 max_speech_samples: int = 250000, max_text_chars: int = 600):
        self._plan_args = (list(utts), budget, seed, modality)
        self._caps = (max_speech_samples, max_text_chars)
        self.epoch = 0
        self._plan = self._make_plan(0)
        if not self._plan:
            raise DataError(f"no {modality.value} batch could be planned")
        self.n_batches = len(self._plan)

    def _make_plan(self, epoch: int) -> List[List[Utterance]]:
        utts, budget, seed, modality = self._plan_args
        return plan_batches(utts, budget, seed, modality, epoch, *self._caps)

    def groups(self, step: int) -> List[Utterance]:
        epoch = epoch_of(step, self.n_batches)
        if epoch != self.epoch:
            self.epoch, self._plan = epoch, self._make_plan(epoch)
        return batch_for_step(self._plan, step)


def fit(trainer: Trainer, n_steps: int, step_fn: Callable[[], Dict[str, Any]], log: TrainingLog,
        validate: Optional[Callable[[], float]] = None,
        save: Optional[Callable[[], None]] = None) -> List[Dict[str, Any]]:
    """
    Run `n_steps` updates of `step_fn` (which calls trainer.begin/update and
    returns the step record). Validation loss is recorded every `eval_every`
    steps when `validate` is given and drives early stopping.
    """
    cfg = trainer.cfg
    stopper = EarlyStopper(cfg.patience if validate else 0)
    records: List[Dict[str, Any]] = []
    for _ in range(n_steps):
        record = step_fn()
        stop = False
        if validate and record["step"] % cfg.eval_every == 0:
            record["val_loss"] = validate()
            stop = stopper.observe(record["val_loss"])
        records.append(record)
        if record["step"] % cfg.log_every == 0:
            log.write(record)
        if save and cfg.checkpoint_every and record["step"] % cfg.checkpoint_every == 0:
            save()
        if stop:
            logger.info(f"Early stop at step {record['step']}: no improvement on {stopper.best:.4f} "
                        f"for {stopper.patience} evaluations",
                        extra={"event": {"early_stop": record["step"], "best": stopper.best}})
            break
    if save:
        save()
    return records
