"""Pseudo episode training: differentiable one-step inner loop and the
meta update."""

from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn.functional as F

from . import nets
from .data import Episode
from .errors import InputError, NumericError
from .inversion import DynamicDataset
from .nets import ArchSpec, NetworkParams
from .optim import Adam


@dataclass
class HyperParams:
    way: int
    shots: int
    queries: int
    alpha_inner: float = 0.01
    alpha_outer: float = 0.001
    beta: float = 0.25
    lam: float = 10.0
    episode_batch: int = 4
    curriculum_start_iter: int = 4000
    patience: int = 6
    second_order: bool = True
    within_model_tasks: bool = False
    feedback_metric: str = "accuracy"  # or "loss"

    def __post_init__(self):
        if min(self.alpha_inner, self.alpha_outer, self.beta) <= 0:
            raise InputError("step sizes must be positive")
        if self.patience < 1:
            raise InputError("patience must be >= 1")
        if self.feedback_metric not in ("accuracy", "loss"):
            raise InputError(f"unknown feedback_metric {self.feedback_metric!r}")


@dataclass
class MetaState:
    theta: NetworkParams
    optimizer: Adam
    iteration: int = 0
    curriculum_active: bool = False


def init_meta_state(spec: ArchSpec, seed: int, hp: HyperParams) -> MetaState:
    theta = nets.build_network(spec, seed)
    theta.requires_grad_(True)
    return MetaState(theta, Adam(theta.entries, lr=hp.alpha_outer),
                     iteration=0, curriculum_active=hp.curriculum_start_iter <= 0)


def sample_pseudo_episode(dd: DynamicDataset, N: int, K: int, M: int,
                          rng: torch.Generator, within_model: bool = False) -> Episode:
    """Draw N pseudo-classes and split each class's K+M instances into
    support and query. Returned image tensors stay differentiable views
    of the dataset pixels."""
    if K != dd.shots or M != dd.queries:
        raise InputError(f"dataset holds K={dd.shots}, M={dd.queries}; asked for K={K}, M={M}")
    if within_model:
        owners = sorted({dd.class_owner[g] for g in range(dd.num_classes)})
        owner = owners[int(torch.randint(len(owners), (1,), generator=rng))]
        pool = [g for g in range(dd.num_classes) if dd.class_owner[g] == owner]
    else:
        pool = list(range(dd.num_classes))
    if len(pool) < N:
        raise InputError(f"need {N} pseudo-classes, have {len(pool)}")
    pick = torch.randperm(len(pool), generator=rng)[:N].tolist()
    chosen = [pool[i] for i in pick]

    per = K + M
    cls_idx = torch.tensor(chosen, dtype=torch.long).unsqueeze(1).expand(N, per)
    inst_idx = torch.stack([torch.randperm(per, generator=rng) for _ in range(N)])
    grouped = dd.images[cls_idx, inst_idx]  # [N, K+M, C, H, W], differentiable
    sup = grouped[:, :K].reshape(N * K, *dd.images.shape[2:])
    qry = grouped[:, K:].reshape(N * M, *dd.images.shape[2:])
    sup_lb = torch.arange(N, dtype=torch.long).repeat_interleave(K)
    qry_lb = torch.arange(N, dtype=torch.long).repeat_interleave(M)
    return Episode(sup, sup_lb, qry, qry_lb, way=N, shots=K, queries_per_class=M,
                   origin="pseudo", source_class_ids=tuple(chosen))


def gradient_step(loss: torch.Tensor, entries: "OrderedDict[str, torch.Tensor]",
                  alpha: float, create_graph: bool) -> "OrderedDict[str, torch.Tensor]":
    """One differentiable gradient-descent step on a named parameter set."""
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()!r}")
    grads = torch.autograd.grad(loss, list(entries.values()), create_graph=create_graph)
    out = OrderedDict()
    for (name, p), g in zip(entries.items(), grads):
        out[name] = p - alpha * (g if create_graph else g.detach())
    return out


def inner_adapt(theta: NetworkParams, support_images: torch.Tensor,
                support_labels: torch.Tensor, alpha_inner: float,
                second_order: bool = True) -> NetworkParams:
    """Single full-gradient step on the support cross-entropy.

    All parameters (backbone and head) are adapted; batch-norm uses batch
    statistics. With ``second_order`` the result stays differentiable
    w.r.t. both theta and the support pixels.
    """
    if support_images.shape[0] < 1:
        raise InputError("empty support set")
    trace = nets.forward(theta, support_images, "batch_stats")
    loss = F.cross_entropy(trace.logits, support_labels)
    adapted = gradient_step(loss, theta.entries, alpha_inner, create_graph=second_order)
    return NetworkParams(theta.spec, adapted, theta.buffers)


def outer_loss_and_acc(theta: NetworkParams, episode: Episode, alpha_inner: float,
                       second_order: bool = True) -> Tuple[torch.Tensor, float]:
    adapted = inner_adapt(theta, episode.support_images, episode.support_labels,
                          alpha_inner, second_order)
    trace = nets.forward(adapted, episode.query_images, "batch_stats")
    loss = F.cross_entropy(trace.logits, episode.query_labels)
    with torch.no_grad():
        acc = (trace.logits.argmax(dim=1) == episode.query_labels).float().mean().item()
    return loss, acc


def outer_loss(theta: NetworkParams, episode: Episode, alpha_inner: float,
               second_order: bool = True) -> torch.Tensor:
    """Query cross-entropy of the one-step-adapted model."""
    return outer_loss_and_acc(theta, episode, alpha_inner, second_order)[0]


def meta_update(state: MetaState, episodes: List[Episode],
                hp: HyperParams) -> Tuple[MetaState, float, float]:
    """One Adam step on the summed outer losses of an episode batch.

    Returns the updated state, the summed outer loss and the mean query
    accuracy (the curriculum feedback metric). The meta model's BN
    buffers are refreshed once per batch, after the parameter update.
    """
    if len(episodes) != hp.episode_batch:
        raise InputError(f"expected {hp.episode_batch} episodes, got {len(episodes)}")
    total = None
    accs = []
    for ep in episodes:
        loss, acc = outer_loss_and_acc(state.theta, ep, hp.alpha_inner, hp.second_order)
        total = loss if total is None else total + loss
        accs.append(acc)
    if not torch.isfinite(total):
        raise NumericError(f"non-finite outer loss at iteration {state.iteration}")
    grads = torch.autograd.grad(total, list(state.theta.entries.values()))
    try:
        new_entries = state.optimizer.step(state.theta.entries,
                                           dict(zip(state.theta.entries.keys(), grads)))
    except NumericError as exc:
        raise NumericError(f"{exc} at iteration {state.iteration}") from exc
    for k, v in new_entries.items():
        state.theta.entries[k] = v.requires_grad_(True)

    with torch.no_grad():
        batch = torch.cat([torch.cat([ep.support_images, ep.query_images])
                           for ep in episodes]).detach()
        nets.forward(state.theta, batch, "batch_stats", update_buffers=True)

    state.iteration += 1
    state.curriculum_active = state.iteration >= hp.curriculum_start_iter
    return state, float(total.item()), float(sum(accs) / len(accs))
