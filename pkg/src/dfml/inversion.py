"""Model inversion: the learnable pseudo-image bank, its losses and updates.

The dataset objective combines a per-image classification loss under the
owning frozen model, total-variation and l2 image priors, and a
batch-statistics regularizer tying BN activations to the frozen model's
running statistics. Frozen models are forwarded in running-statistics
mode (the batch statistics needed by the regularizer are recorded by the
forward trace either way), which keeps the classification component
exactly additive across image subsets.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List

import torch
import torch.nn.functional as F

from . import nets
from .errors import InputError, InternalError, NumericError
from .nets import ForwardTrace, NetworkParams
from .seeding import make_generator
from .zoo import ModelZoo, ModelZooEntry

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class InversionWeights:
    alpha_tv: float = 1e-4
    alpha_l2: float = 1e-5
    feature_weight: float = 1.0

    def __post_init__(self):
        if min(self.alpha_tv, self.alpha_l2, self.feature_weight) < 0:
            raise InputError("inversion weights must be non-negative")


@dataclass
class DynamicDataset:
    """Learnable pseudo-image bank: K+M instances per global pseudo-class."""
    images: torch.Tensor  # [num_global_classes, K+M, C, H, W], requires_grad
    class_owner: Dict[int, int]         # global class id -> zoo entry index
    assigned_labels: Dict[int, int]     # global class id -> owning model's local logit
    shots: int
    queries: int
    # Adam accumulators for the dataset optimizer
    opt_m: torch.Tensor = None
    opt_v: torch.Tensor = None
    opt_step: int = 0

    @property
    def num_classes(self) -> int:
        return self.images.shape[0]

    @property
    def instances_per_class(self) -> int:
        return self.images.shape[1]


def init_dynamic_dataset(zoo: ModelZoo, K: int, M: int, shape, seed: int) -> DynamicDataset:
    """Gaussian-noise initialization (mean 0, std 1), zeroed optimizer state."""
    shape = tuple(int(d) for d in shape)
    if shape != zoo.input_shape:
        raise InputError(f"shape {shape} does not match zoo input shape {zoo.input_shape}")
    G = zoo.num_global_classes
    gen = make_generator(seed)
    images = torch.randn(G, K + M, *shape, generator=gen)
    images.requires_grad_(True)
    table = zoo.global_classes
    class_owner = {g: table[g][0] for g in range(G)}
    assigned = {g: table[g][1] for g in range(G)}
    return DynamicDataset(images, class_owner, assigned, K, M,
                          opt_m=torch.zeros_like(images, requires_grad=False),
                          opt_v=torch.zeros_like(images, requires_grad=False))


def tv_prior(images: torch.Tensor) -> torch.Tensor:
    """Anisotropic squared total variation, averaged over the batch."""
    if images.shape[-1] < 2 or images.shape[-2] < 2:
        raise InputError("tv_prior requires spatial extent >= 2")
    dy = images[:, :, 1:, :] - images[:, :, :-1, :]
    dx = images[:, :, :, 1:] - images[:, :, :, :-1]
    return (dy.pow(2).sum() + dx.pow(2).sum()) / images.shape[0]


def l2_prior(images: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of each image's squared l2 norm."""
    return images.pow(2).sum(dim=tuple(range(1, images.dim()))).mean()


def bn_feature_loss(entry: ModelZooEntry, trace: ForwardTrace) -> torch.Tensor:
    """Squared l2 distance between batch statistics and running buffers."""
    prefixes = entry.params.bn_prefixes()
    if len(prefixes) != len(trace.per_bn_layer_batch_mean):
        raise InternalError(
            f"trace has {len(trace.per_bn_layer_batch_mean)} BN layers, "
            f"model has {len(prefixes)}")
    loss = trace.logits.new_zeros(())
    for prefix, mu, var in zip(prefixes, trace.per_bn_layer_batch_mean,
                               trace.per_bn_layer_batch_variance):
        rm = entry.params.buffers[f"{prefix}.running_mean"]
        rv = entry.params.buffers[f"{prefix}.running_var"]
        loss = loss + (mu - rm).pow(2).sum() + (var - rv).pow(2).sum()
    return loss


def _regularized_batch_loss(entry: ModelZooEntry, images: torch.Tensor,
                            labels: torch.Tensor, weights: InversionWeights) -> torch.Tensor:
    trace = nets.forward(entry.params, images, "running_stats")
    loss = F.cross_entropy(trace.logits, labels, reduction="sum")
    if weights.alpha_tv:
        loss = loss + weights.alpha_tv * tv_prior(images)
    if weights.alpha_l2:
        loss = loss + weights.alpha_l2 * l2_prior(images)
    if weights.feature_weight:
        if entry.params.bn_prefixes():
            loss = loss + weights.feature_weight * bn_feature_loss(entry, trace)
        else:
            _warn_no_bn(entry)
    return loss


_no_bn_warned = set()


def _warn_no_bn(entry):
    key = id(entry)
    if key not in _no_bn_warned:
        _no_bn_warned.add(key)
        log.warning("model %s has no BN layers; feature regularizer is 0",
                    entry.source_dataset_id)


def inversion_loss(zoo: ModelZoo, dd: DynamicDataset, weights: InversionWeights,
                   class_subset=None) -> torch.Tensor:
    """Total inversion objective over the selected pseudo-classes.

    Classification terms are summed per image; priors and the feature
    regularizer are computed per owning model over that model's selected
    images.
    """
    if class_subset is None:
        selected = list(range(dd.num_classes))
    else:
        selected = sorted(class_subset)
        bad = [g for g in selected if g < 0 or g >= dd.num_classes]
        if bad:
            raise InputError(f"unknown pseudo-classes {bad}")
    if not selected:
        raise InputError("empty class selection")

    by_owner: Dict[int, List[int]] = {}
    for g in selected:
        by_owner.setdefault(dd.class_owner[g], []).append(g)

    total = dd.images.new_zeros(())
    per = dd.instances_per_class
    for ei, gids in sorted(by_owner.items()):
        entry = zoo.entries[ei]
        imgs = dd.images[gids].reshape(-1, *dd.images.shape[2:])
        labels = torch.tensor([dd.assigned_labels[g] for g in gids],
                              dtype=torch.long).repeat_interleave(per)
        total = total + _regularized_batch_loss(entry, imgs, labels, weights)
    return total


def dataset_step(dd: DynamicDataset, grad: torch.Tensor, beta: float = 0.25) -> DynamicDataset:
    """One Adam step on the pseudo images (no pixel clamping)."""
    if grad.shape != dd.images.shape:
        raise InputError(f"grad shape {tuple(grad.shape)} != images shape {tuple(dd.images.shape)}")
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite entries in dataset gradient")
    b1, b2 = ADAM_BETAS
    dd.opt_step += 1
    with torch.no_grad():
        dd.opt_m.mul_(b1).add_(grad, alpha=1 - b1)
        dd.opt_v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
        m_hat = dd.opt_m / (1 - b1 ** dd.opt_step)
        v_hat = dd.opt_v / (1 - b2 ** dd.opt_step)
        dd.images.data.add_(-beta * m_hat / (v_hat.sqrt() + ADAM_EPS))
    return dd


def synthesize_from_model(params: NetworkParams, labels, count_per_label: int,
                          steps: int, weights: InversionWeights, seed: int,
                          lr: float = 0.25):
    """Invert fresh Gaussian noise against a single frozen model.

    Returns ``(images, targets)`` where targets repeat each entry of
    ``labels`` ``count_per_label`` times.
    """
    if steps < 1:
        raise InputError("steps must be >= 1")
    if count_per_label < 1:
        raise InputError("count_per_label must be >= 1")
    labels = list(labels)
    if not labels:
        raise InputError("labels must be non-empty")
    entry = ModelZooEntry(params.spec, params, list(range(params.spec.num_classes)),
                          "synthesis")
    gen = make_generator(seed)
    n = len(labels) * count_per_label
    imgs = torch.randn(n, *params.spec.input_shape, generator=gen).requires_grad_(True)
    targets = torch.tensor(labels, dtype=torch.long).repeat_interleave(count_per_label)
    m = torch.zeros_like(imgs)
    v = torch.zeros_like(imgs)
    b1, b2 = ADAM_BETAS
    for t in range(1, steps + 1):
        loss = _regularized_batch_loss(entry, imgs, targets, weights)
        (grad,) = torch.autograd.grad(loss, imgs)
        if not torch.isfinite(grad).all():
            raise NumericError(f"non-finite gradient at synthesis step {t}")
        with torch.no_grad():
            m.mul_(b1).add_(grad, alpha=1 - b1)
            v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
            imgs.data.add_(-lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)).sqrt() + ADAM_EPS))
    return imgs.detach(), targets


def dump_images(dd: DynamicDataset, out_dir) -> List[str]:
    """Write one PNG grid per pseudo-class (min-max normalized per image)."""
    import numpy as np
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    imgs = dd.images.detach()
    for g in range(dd.num_classes):
        tiles = []
        for j in range(dd.instances_per_class):
            im = imgs[g, j]
            lo, hi = im.min(), im.max()
            im = (im - lo) / (hi - lo) if hi > lo else torch.zeros_like(im)
            tiles.append(im.clamp(0, 1))
        grid = torch.cat(tiles, dim=2)  # one row per class
        arr = (grid.permute(1, 2, 0).numpy() * 255).astype(np.uint8)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
        path = os.path.join(out_dir, f"class_{g:03d}.png")
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths
