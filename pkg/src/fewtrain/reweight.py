"""Meta re-weighting of pseudo-labeled examples.

Each pseudo-labeled example gets a per-example perturbation weight; a
virtual SGD step on the perturbation-weighted loss is built on the tape,
the labeled mini-batch loss is evaluated at the virtual parameters, and
the derivative of that loss with respect to each perturbation (taken at
zero, through the whole virtual update) scores the example. Negative
scores are filtered out; the survivors drive one real optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, InputError, UsageError
from .prompting import PromptModel, one_hot

WEIGHT_NORM_EPS = 1e-12


@dataclass
class PseudoBatch:
    """Unlabeled cloze instances with the teacher's soft label distributions."""

    instances: list
    teacher_dists: np.ndarray  # [n, n_labels]

    def __post_init__(self):
        self.teacher_dists = np.asarray(self.teacher_dists, dtype=np.float64)
        if len(self.instances) != self.teacher_dists.shape[0]:
            raise InputError("instances and teacher_dists disagree in length")
        if np.any(np.abs(self.teacher_dists.sum(axis=-1) - 1.0) > 1e-9):
            raise InputError("teacher distributions must sum to 1")

    def __len__(self) -> int:
        return len(self.instances)


@dataclass(frozen=True)
class ReweightConfig:
    virtual_lr: float = 1e-3     # virtual step size; callers default it to st_lr
    val_batch_size: int = 4      # labeled mini-batch size for scoring
    normalize: bool = True       # normalize clamped weights to sum 1

    def __post_init__(self):
        if self.virtual_lr <= 0:
            raise ConfigError("virtual_lr must be positive")
        if self.val_batch_size < 1:
            raise ConfigError("val_batch_size must be positive")


def weighted_loss(batch: PseudoBatch, epsilon: Tensor,
                  model: PromptModel, tunable=None) -> Tensor:
    """(1/n) * sum_i epsilon_i * CE(teacher_dist_i, student logits_i)."""
    n = len(batch)
    if epsilon.shape != (n,):
        raise InputError(f"epsilon must have shape ({n},)")
    ce = model.loss_rows(batch.instances, batch.teacher_dists, tunable)
    return dc.scale(dc.tensor_sum(dc.mul(epsilon, ce)), 1.0 / n)


def meta_weights(batch: PseudoBatch, val_instances, model: PromptModel,
                 cfg: ReweightConfig) -> np.ndarray:
    """Per-example meta scores u, positive where upweighting an example
    would reduce the labeled mini-batch loss after one virtual step.

    The virtual step is plain SGD on the perturbation-weighted loss at
    perturbation zero; differentiation goes through the whole update.
    The model's real parameters are untouched.
    """
    if not val_instances:
        raise UsageError("meta_weights needs a non-empty labeled mini-batch")
    if any(inst.gold is None for inst in val_instances):
        raise InputError("labeled mini-batch instances need gold labels")

    epsilon = dc.parameter(np.zeros(len(batch)))
    loss_r = weighted_loss(batch, epsilon, model)
    psi = model.tunable.tensors()
    psi_grads = dc.grad(loss_r, psi, create_graph=True)
    virtual = model.tunable.substitute(
        dc.sub(p, dc.scale(g, cfg.virtual_lr))
        for p, g in zip(psi, psi_grads))

    targets = one_hot([inst.gold for inst in val_instances],
                      model.verbalizer.n_labels)
    val_loss = dc.mean(model.loss_rows(val_instances, targets, tunable=virtual))
    (eps_grad,) = dc.grad(val_loss, [epsilon])
    return -eps_grad.data


def to_weights(u: np.ndarray, cfg: ReweightConfig) -> np.ndarray:
    """Clamp negative scores to zero; optionally normalize the rest."""
    raw = np.maximum(np.asarray(u, dtype=np.float64), 0.0)
    if cfg.normalize:
        return raw / (raw.sum() + WEIGHT_NORM_EPS)
    return raw


def reweighted_step(batch: PseudoBatch, weights: np.ndarray,
                    model: PromptModel, optimizer) -> None:
    """One optimizer step on (1/n) * sum_i w_i * CE_i over the tunables.

    An all-zero weight vector skips the step entirely, leaving parameters
    bit-identical.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(batch),):
        raise InputError("weights must match the batch length")
    if np.any(weights < 0):
        raise InputError("weights must be non-negative")
    if not np.any(weights):
        return
    ce = model.loss_rows(batch.instances, batch.teacher_dists)
    loss = dc.scale(dc.tensor_sum(dc.mul(dc.Tensor(weights), ce)),
                    1.0 / len(batch))
    optimizer.zero_grad()
    dc.backward(loss)
    optimizer.step()
