"""Curriculum control: plateau feedback, the gradient switch and the
adversarial dynamic-dataset update."""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch

from .episodic import HyperParams, MetaState, outer_loss, sample_pseudo_episode
from .errors import InputError
from .inversion import DynamicDataset, InversionWeights, dataset_step, inversion_loss
from .zoo import ModelZoo

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass
class FeedbackMonitor:
    """Plateau detector over the per-iteration training metric.

    Emits a positive signal once the metric has failed to improve for
    ``patience`` consecutive iterations, and keeps emitting it until an
    improvement occurs.
    """
    patience: int = 6
    metric: str = "accuracy"  # "accuracy" improves upward, "loss" downward
    best_metric: Optional[float] = None
    stall_count: int = 0
    last_omega: str = NEGATIVE


def feedback_update(mon: FeedbackMonitor, value: float) -> Tuple[FeedbackMonitor, str]:
    if mon.metric == "accuracy":
        improved = mon.best_metric is None or value > mon.best_metric
    else:
        improved = mon.best_metric is None or value < mon.best_metric
    if improved:
        mon.best_metric = value
        mon.stall_count = 0
        mon.last_omega = NEGATIVE
    else:
        mon.stall_count += 1
        mon.last_omega = POSITIVE if mon.stall_count >= mon.patience else NEGATIVE
    return mon, mon.last_omega


def gradient_switch(omega: str, curriculum_active: bool) -> int:
    """Indicator gating the reversed outer-loss gradient into the dataset."""
    if omega not in (POSITIVE, NEGATIVE):
        raise InputError(f"unknown feedback value {omega!r}")
    return 1 if (omega == POSITIVE and curriculum_active) else 0


def eci_dataset_update(dd: DynamicDataset, zoo: ModelZoo, state: MetaState,
                       hp: HyperParams, switch: int, rng: torch.Generator,
                       weights: InversionWeights) -> Tuple[DynamicDataset, Dict]:
    """One-step dataset update: inversion loss, minus the scaled outer loss
    of one freshly sampled pseudo task when the switch is on.

    Meta parameters are treated as constants; only the pseudo images move.
    """
    if switch not in (0, 1):
        raise InputError(f"switch must be 0 or 1, got {switch!r}")
    inv = inversion_loss(zoo, dd, weights)
    outer_val: Optional[float] = None
    if switch:
        episode = sample_pseudo_episode(dd, hp.way, hp.shots, hp.queries, rng,
                                        hp.within_model_tasks)
        outer = outer_loss(state.theta, episode, hp.alpha_inner, second_order=True)
        total = inv - hp.lam * outer
        outer_val = float(outer.item())
    else:
        total = inv
    (grad,) = torch.autograd.grad(total, dd.images)
    dd = dataset_step(dd, grad, hp.beta)
    return dd, {"inv_loss": float(inv.item()), "outer_loss": outer_val}
