"""Construction of the frozen pre-trained model collection and the
Random / Average baselines."""

import os
from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn.functional as F

from . import nets
from .data import LabeledDataset, SplitSpec
from .errors import ConfigError, DataIOError, InputError, ScenarioError, TrainingFailure
from .nets import ArchSpec, NetworkParams
from .optim import Adam
from .seeding import derive_seed, make_generator

SCENARIOS = ("SS", "SH", "MH")


@dataclass
class ModelZooEntry:
    spec: ArchSpec
    params: NetworkParams  # frozen
    global_class_ids: List[int]  # local logit index -> global pseudo-class id
    source_dataset_id: str

    def __post_init__(self):
        if len(set(self.global_class_ids)) != len(self.global_class_ids):
            raise InputError("global_class_ids must be unique within an entry")


@dataclass
class ModelZoo:
    entries: List[ModelZooEntry]

    @property
    def global_classes(self) -> List[Tuple[int, int]]:
        """Global id -> (entry index, local class index)."""
        table = {}
        for ei, e in enumerate(self.entries):
            for local, gid in enumerate(e.global_class_ids):
                if gid in table:
                    raise InputError(f"global class {gid} owned by two entries")
                table[gid] = (ei, local)
        return [table[g] for g in sorted(table)]

    @property
    def num_global_classes(self) -> int:
        return sum(len(e.global_class_ids) for e in self.entries)

    @property
    def input_shape(self) -> tuple:
        return self.entries[0].spec.input_shape


def _train_supervised(spec: ArchSpec, images, labels, epochs, lr, batch_size,
                      target_acc, seed) -> Tuple[NetworkParams, float]:
    params = nets.build_network(spec, seed)
    params.requires_grad_(True)
    opt = Adam(params.entries, lr=lr)
    gen = make_generator(derive_seed(seed, "batching"))
    n = images.shape[0]
    acc = 0.0
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            if idx.numel() < 2:
                continue  # batch-norm needs at least 2 items
            trace = nets.forward(params, images[idx], "batch_stats", update_buffers=True)
            loss = F.cross_entropy(trace.logits, labels[idx])
            grads = torch.autograd.grad(loss, list(params.entries.values()))
            new_entries = opt.step(params.entries,
                                   dict(zip(params.entries.keys(), grads)))
            for k, v in new_entries.items():
                params.entries[k] = v.requires_grad_(True)
        with torch.no_grad():
            trace = nets.forward(params, images, "running_stats")
            acc = (trace.logits.argmax(dim=1) == labels).float().mean().item()
        if acc >= target_acc:
            break
    if acc < target_acc:
        raise TrainingFailure(
            f"pre-training reached {acc:.3f} < {target_acc} after {epochs} epochs", acc)
    frozen = params.clone()  # detached copy
    return frozen, acc


def build_zoo(ds_list: List[LabeledDataset], splits: List[SplitSpec], num_models: int,
              way: int, scenario: str, epochs: int, rng: torch.Generator,
              width_multiplier: float = 1.0, lr: float = 1e-3, batch_size: int = 32,
              target_acc: float = 0.95) -> ModelZoo:
    """Pre-train ``num_models`` N-way classifiers from meta-train classes.

    Class subsets are sampled without replacement within a model and with
    replacement across models; every (entry, local class) pair receives
    its own dense global pseudo-class id.
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    if scenario in ("SS", "SH") and len(ds_list) != 1:
        raise ScenarioError(f"{scenario} requires exactly one dataset")
    if len(ds_list) != len(splits):
        raise InputError("need one SplitSpec per dataset")
    for ds, split in zip(ds_list, splits):
        if len(split.train_classes) < way:
            raise InputError(f"dataset {ds.dataset_id} train split has < {way} classes")

    entries: List[ModelZooEntry] = []
    next_gid = 0
    for k in range(num_models):
        if scenario == "MH":
            di = int(torch.randint(len(ds_list), (1,), generator=rng))
        else:
            di = 0
        if scenario == "SS":
            arch = "conv4"
        else:
            arch = ("conv4", "resnet8")[int(torch.randint(2, (1,), generator=rng))]
        ds, split = ds_list[di], splits[di]
        train_classes = sorted(split.train_classes)
        pick = torch.randperm(len(train_classes), generator=rng)[:way].tolist()
        chosen = [train_classes[i] for i in pick]
        idxs = [i for c in chosen for i in ds.class_index[c]]
        images = ds.images[idxs]
        local_of = {c: j for j, c in enumerate(chosen)}
        labels = torch.tensor([local_of[int(ds.labels[i])] for i in idxs], dtype=torch.long)
        spec = ArchSpec(arch, ds.image_shape, way, width_multiplier)
        model_seed = int(torch.randint(2 ** 31 - 1, (1,), generator=rng))
        params, _ = _train_supervised(spec, images, labels, epochs, lr, batch_size,
                                      target_acc, model_seed)
        gids = list(range(next_gid, next_gid + way))
        next_gid += way
        entries.append(ModelZooEntry(spec, params, gids, ds.dataset_id))
    return ModelZoo(entries)


def random_init_baseline(spec: ArchSpec, seed: int) -> NetworkParams:
    """Freshly initialized base model; baseline for evaluation."""
    return nets.build_network(spec, seed)


def average_models(zoo: ModelZoo) -> NetworkParams:
    """Element-wise mean of all zoo entries; defined only for homogeneous zoos."""
    specs = {e.spec for e in zoo.entries}
    if len(specs) != 1:
        raise ScenarioError("average baseline requires identical architectures across the zoo")
    ref = zoo.entries[0].params
    out = ref.clone()
    n = len(zoo.entries)
    for k in out.entries:
        out.entries[k] = sum(e.params.entries[k] for e in zoo.entries) / n
    for k in out.buffers:
        out.buffers[k] = sum(e.params.buffers[k] for e in zoo.entries) / n
    return out


# --- persistence ---------------------------------------------------------

def save_zoo(zoo: ModelZoo, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    for k, e in enumerate(zoo.entries):
        fname = f"entry_{k}.ckpt"
        nets.save_checkpoint(e.params, os.path.join(directory, fname))
        table = ",".join(f"{local}:{gid}" for local, gid in enumerate(e.global_class_ids))
        lines.append(f"{fname}\t{e.spec.arch_id}\t{e.source_dataset_id}\t{table}")
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_zoo(directory) -> ModelZoo:
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.isfile(manifest):
        raise DataIOError(f"no zoo manifest at {manifest}")
    entries = []
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            fname, arch_id, ds_id, table = line.split("\t")
            params = nets.load_checkpoint(os.path.join(directory, fname))
            if params.spec.arch_id != arch_id:
                raise DataIOError(f"manifest arch {arch_id} != checkpoint arch {params.spec.arch_id}")
            pairs = sorted((int(a), int(b)) for a, b in
                           (item.split(":") for item in table.split(",")))
            gids = [b for _, b in pairs]
            entries.append(ModelZooEntry(params.spec, params, gids, ds_id))
    return ModelZoo(entries)
