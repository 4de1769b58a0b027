"""Meta-testing: fast adaptation, contrastive inversion calibration,
head retraining and the multi-task evaluation harness."""

import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from . import nets
from .data import LabeledDataset, sample_episode_from_dataset
from .episodic import inner_adapt
from .errors import InputError
from .inversion import InversionWeights, synthesize_from_model
from .nets import ArchSpec, NetworkParams, head_keys
from .optim import Adam
from .seeding import derive_seed, make_generator


@dataclass
class IcfilConfig:
    pseudo_per_class: int = 5
    inversion_steps: int = 200
    inversion_lr: float = 0.25
    inversion_weights: InversionWeights = field(default_factory=InversionWeights)
    tau: float = 0.1
    backbone_lr: float = 1e-5
    backbone_iters: int = 1
    head_iters: int = 100
    head_lr: float = 0.01
    normalize_embeddings: bool = True
    calibrate_backbone: bool = True
    seed: int = 0


@dataclass
class AdaptedModel:
    """Adapted backbone plus linear head, kept separable for calibration."""
    backbone_entries: "OrderedDict[str, torch.Tensor]"
    buffers: "OrderedDict[str, torch.Tensor]"
    head_weight: torch.Tensor
    head_bias: torch.Tensor
    spec: ArchSpec

    def to_network(self) -> NetworkParams:
        entries = OrderedDict(self.backbone_entries)
        entries["head.weight"] = self.head_weight
        entries["head.bias"] = self.head_bias
        return NetworkParams(self.spec, entries, self.buffers)


@dataclass
class EvalReport:
    per_task_acc: List[float]
    mean: float
    std: float
    ci95: float
    num_tasks: int
    metadata: dict = field(default_factory=dict)


def split_adapted(params: NetworkParams) -> AdaptedModel:
    hw, hb = head_keys()
    backbone = OrderedDict((k, v) for k, v in params.entries.items() if k not in (hw, hb))
    return AdaptedModel(backbone, params.buffers, params.entries[hw],
                        params.entries[hb], params.spec)


def fast_adapt_test(theta: NetworkParams, support_images: torch.Tensor,
                    support_labels: torch.Tensor, alpha_inner: float) -> AdaptedModel:
    """One-step adaptation on the real support set, split into backbone + head."""
    theta = theta.clone().requires_grad_(True)
    adapted = inner_adapt(theta, support_images, support_labels, alpha_inner,
                          second_order=False)
    detached = NetworkParams(
        adapted.spec,
        OrderedDict((k, v.detach()) for k, v in adapted.entries.items()),
        adapted.buffers)
    return split_adapted(detached)


def _embed(model: AdaptedModel, images: torch.Tensor, bn_mode: str) -> torch.Tensor:
    return nets.forward(model.to_network(), images, bn_mode).embedding


def calibration_loss(model: AdaptedModel, real_images: torch.Tensor,
                     real_labels: torch.Tensor, pseudo_images: torch.Tensor,
                     pseudo_labels: torch.Tensor, tau: float,
                     normalize: bool = True) -> torch.Tensor:
    """Contrastive alignment between real support embeddings and pseudo
    embeddings: same-label pseudo images are positives, all pseudo images
    are the softmax denominator."""
    if tau <= 0:
        raise InputError("tau must be positive")
    if pseudo_images.shape[0] == 0:
        raise InputError("pseudo support is empty")
    for lbl in real_labels.tolist():
        if not (pseudo_labels == lbl).any():
            raise InputError(f"no pseudo positives for class {lbl}")
    mode_r = "batch_stats" if real_images.shape[0] >= 2 else "running_stats"
    mode_p = "batch_stats" if pseudo_images.shape[0] >= 2 else "running_stats"
    zr = _embed(model, real_images, mode_r)
    zp = _embed(model, pseudo_images, mode_p)
    if normalize:
        zr = F.normalize(zr, dim=1)
        zp = F.normalize(zp, dim=1)
    sims = zr @ zp.t() / tau  # [R, P]
    log_softmax = sims - torch.logsumexp(sims, dim=1, keepdim=True)
    pos_mask = (real_labels[:, None] == pseudo_labels[None, :]).to(sims.dtype)
    return -(log_softmax * pos_mask).sum()


def icfil_calibrate(adapted: AdaptedModel, support_images: torch.Tensor,
                    support_labels: torch.Tensor, config: IcfilConfig) -> AdaptedModel:
    """Calibrate the adapted backbone against freshly inverted pseudo
    images, then retrain a new linear head on the full support set."""
    if support_images.shape[0] == 0:
        raise InputError("empty support set")
    N = adapted.spec.num_classes

    if config.calibrate_backbone:
        pseudo_images, pseudo_labels = synthesize_from_model(
            adapted.to_network(), list(range(N)), config.pseudo_per_class,
            config.inversion_steps, config.inversion_weights,
            derive_seed(config.seed, "icfil-synthesis"), lr=config.inversion_lr)
        backbone = OrderedDict((k, v.detach().clone().requires_grad_(True))
                               for k, v in adapted.backbone_entries.items())
        model = AdaptedModel(backbone, adapted.buffers, adapted.head_weight,
                             adapted.head_bias, adapted.spec)
        opt = Adam(backbone, lr=config.backbone_lr)
        for _ in range(config.backbone_iters):
            loss = calibration_loss(model, support_images, support_labels,
                                    pseudo_images, pseudo_labels, config.tau,
                                    config.normalize_embeddings)
            grads = torch.autograd.grad(loss, list(backbone.values()))
            new = opt.step(backbone, dict(zip(backbone.keys(), grads)))
            for k, v in new.items():
                backbone[k] = v.requires_grad_(True)
        backbone = OrderedDict((k, v.detach()) for k, v in backbone.items())
    else:
        backbone = OrderedDict((k, v.detach()) for k, v in adapted.backbone_entries.items())

    # freeze the backbone, retrain a fresh linear head on the support set
    feat = nets.feature_dim(adapted.spec)
    gen = make_generator(derive_seed(config.seed, "icfil-head"))
    head = OrderedDict()
    head["head.weight"] = (torch.randn(N, feat, generator=gen) * 0.01).requires_grad_(True)
    head["head.bias"] = torch.zeros(N, requires_grad=True)
    frozen = AdaptedModel(backbone, adapted.buffers,
                          head["head.weight"], head["head.bias"], adapted.spec)
    mode = "batch_stats" if support_images.shape[0] >= 2 else "running_stats"
    with torch.no_grad():
        emb = _embed(frozen, support_images, mode)
    opt = Adam(head, lr=config.head_lr)
    for _ in range(config.head_iters):
        logits = emb @ head["head.weight"].t() + head["head.bias"]
        loss = F.cross_entropy(logits, support_labels)
        grads = torch.autograd.grad(loss, list(head.values()))
        new = opt.step(head, dict(zip(head.keys(), grads)))
        for k, v in new.items():
            head[k] = v.requires_grad_(True)
    return AdaptedModel(backbone, adapted.buffers,
                        head["head.weight"].detach(), head["head.bias"].detach(),
                        adapted.spec)


def predict(model: AdaptedModel, query_images: torch.Tensor) -> torch.Tensor:
    """Argmax class predictions; ties break toward the lowest class index."""
    mode = "batch_stats" if query_images.shape[0] >= 2 else "running_stats"
    with torch.no_grad():
        logits = nets.forward(model.to_network(), query_images, mode).logits
    return logits.argmax(dim=1)  # argmax returns the first maximal index


def _run_task(theta, splits, N, K, M, use_icfil, alpha_inner, icfil_cfg, task_index,
              task_seed):
    ds, classes = splits[task_index % len(splits)]
    gen = make_generator(task_seed)
    episode = sample_episode_from_dataset(ds, classes, N, K, M, gen)
    adapted = fast_adapt_test(theta, episode.support_images, episode.support_labels,
                              alpha_inner)
    if use_icfil:
        cfg = replace(icfil_cfg, seed=derive_seed(task_seed, "icfil"))
        adapted = icfil_calibrate(adapted, episode.support_images,
                                  episode.support_labels, cfg)
    preds = predict(adapted, episode.query_images)
    return float((preds == episode.query_labels).float().mean().item())


def evaluate(theta: NetworkParams, splits: Sequence[Tuple[LabeledDataset, set]],
             N: int, K: int, M: int, num_tasks: int, use_icfil: bool,
             rng: torch.Generator, alpha_inner: float = 0.01,
             icfil_cfg: Optional[IcfilConfig] = None,
             parallel: int = 1) -> EvalReport:
    """Accuracy over ``num_tasks`` sampled target tasks (round-robin across
    splits), with sample std and a normal-approximation 95% CI."""
    if num_tasks < 1:
        raise InputError("num_tasks must be >= 1")
    if not splits:
        raise InputError("need at least one (dataset, class set) split")
    icfil_cfg = icfil_cfg or IcfilConfig()
    task_seeds = [int(torch.randint(2 ** 62, (1,), generator=rng)) for _ in range(num_tasks)]

    def run(i):
        return _run_task(theta, list(splits), N, K, M, use_icfil, alpha_inner,
                         icfil_cfg, i, task_seeds[i])

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            accs = list(pool.map(run, range(num_tasks)))
    else:
        accs = [run(i) for i in range(num_tasks)]

    mean = sum(accs) / num_tasks
    if num_tasks > 1:
        std = math.sqrt(sum((a - mean) ** 2 for a in accs) / (num_tasks - 1))
    else:
        std = 0.0
    ci95 = 1.96 * std / math.sqrt(num_tasks)
    meta = {"way": N, "shots": K, "queries": M, "use_icfil": use_icfil,
            "alpha_inner": alpha_inner}
    if use_icfil:
        meta.update({"icfil_pseudo_per_class": icfil_cfg.pseudo_per_class,
                     "icfil_inversion_steps": icfil_cfg.inversion_steps,
                     "icfil_inversion_lr": icfil_cfg.inversion_lr,
                     "icfil_tau": icfil_cfg.tau})
    return EvalReport(accs, mean, std, ci95, num_tasks, meta)


def write_eval_report(report: EvalReport, path, config_echo: Optional[dict] = None) -> None:
    import json
    payload = {
        "num_tasks": report.num_tasks,
        "mean": report.mean,
        "std": report.std,
        "ci95": report.ci95,
        "metadata": report.metadata,
        "config": config_echo or {},
        "per_task_acc": report.per_task_acc,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
