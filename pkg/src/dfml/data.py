"""Datasets, class splits and N-way K-shot episode sampling."""

import os
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Tuple

import numpy as np
import torch

from .errors import DataIOError, InputError
from .seeding import make_generator


@dataclass
class LabeledDataset:
    images: torch.Tensor  # [num_items, C, H, W], values in [0, 1]
    labels: torch.Tensor  # [num_items], long
    class_index: Dict[int, List[int]]
    dataset_id: str

    @property
    def num_items(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def classes(self) -> List[int]:
        return sorted(self.class_index)

    def validate(self):
        seen = set()
        for cid, idxs in self.class_index.items():
            for i in idxs:
                if int(self.labels[i]) != cid:
                    raise InputError(f"class_index entry {i} labeled {int(self.labels[i])}, expected {cid}")
                if i in seen:
                    raise InputError(f"item {i} appears in two class lists")
                seen.add(i)
        if len(seen) != self.num_items:
            raise InputError("class_index does not cover all items")


@dataclass(frozen=True)
class SplitSpec:
    train_classes: FrozenSet[int]
    val_classes: FrozenSet[int]
    test_classes: FrozenSet[int]

    def __post_init__(self):
        object.__setattr__(self, "train_classes", frozenset(self.train_classes))
        object.__setattr__(self, "val_classes", frozenset(self.val_classes))
        object.__setattr__(self, "test_classes", frozenset(self.test_classes))
        a, b, c = self.train_classes, self.val_classes, self.test_classes
        if a & b or a & c or b & c:
            raise InputError("split class sets must be pairwise disjoint")


@dataclass
class Episode:
    support_images: torch.Tensor  # [N*K, C, H, W]
    support_labels: torch.Tensor  # [N*K], values 0..N-1
    query_images: torch.Tensor    # [N*M, C, H, W]
    query_labels: torch.Tensor    # [N*M]
    way: int
    shots: int
    queries_per_class: int
    origin: str  # "real" | "pseudo"
    source_class_ids: tuple = ()


def load_dataset(path, expected_shape: Tuple[int, int, int]) -> LabeledDataset:
    """Load a class-per-subdirectory tree of 8-bit PNGs.

    Layout: ``<root>/<class_name>/<item>.png``; class ids are assigned by
    sorted class-directory name. Pixels are scaled to [0, 1].
    """
    from PIL import Image

    if not os.path.isdir(path):
        raise DataIOError(f"dataset root {path} does not exist")
    class_dirs = sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))
    if not class_dirs:
        raise DataIOError(f"dataset root {path} contains no class directories")
    C, H, W = expected_shape
    images, labels = [], []
    class_index: Dict[int, List[int]] = {}
    for cid, cname in enumerate(class_dirs):
        cdir = os.path.join(path, cname)
        items = sorted(f for f in os.listdir(cdir) if f.lower().endswith(".png"))
        if not items:
            raise DataIOError(f"class directory {cdir} contains no PNG files")
        class_index[cid] = []
        for fname in items:
            try:
                img = Image.open(os.path.join(cdir, fname))
                img = img.convert("RGB" if C == 3 else "L")
            except OSError as exc:
                raise DataIOError(f"cannot read image {fname} in {cdir}: {exc}") from exc
            arr = np.asarray(img, dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[:, :, None]
            arr = arr.transpose(2, 0, 1)
            if arr.shape != (C, H, W):
                raise InputError(
                    f"{cdir}/{fname} has shape {arr.shape}, expected {(C, H, W)}")
            class_index[cid].append(len(images))
            images.append(torch.from_numpy(arr.copy()))
            labels.append(cid)
    ds = LabeledDataset(torch.stack(images), torch.tensor(labels, dtype=torch.long),
                        class_index, dataset_id=os.path.basename(os.path.normpath(path)))
    ds.validate()
    return ds


def make_synthetic_blobs(num_classes: int, per_class: int,
                         shape: Tuple[int, int, int], seed: int) -> LabeledDataset:
    """Deterministic, linearly separable synthetic image classes.

    Each class is a plane-wave template with a class-specific spatial
    frequency and phase. Every image additionally carries a random mix of
    shared distractor waves (frequencies disjoint from all class
    templates) and i.i.d. noise of amplitude 0.1. A linear probe on raw
    pixels projects the distractors out, while a 1-shot classifier in an
    untrained feature space is dominated by them, which keeps random-init
    baselines near chance.
    """
    if num_classes < 4:
        raise InputError("num_classes must be >= 4")
    if per_class < 2:
        raise InputError("per_class must be >= 2")
    C, H, W = (int(d) for d in shape)
    gen = make_generator(seed)
    yy, xx = torch.meshgrid(torch.arange(H).float() / H,
                            torch.arange(W).float() / W, indexing="ij")
    class_freqs = [(1, 0), (0, 1), (1, 1), (2, 1), (1, 2), (2, 0), (0, 2), (2, 2),
                   (3, 1), (1, 3), (3, 0), (0, 3), (3, 2), (2, 3), (3, 3), (4, 1)]
    dist_freqs = [(4, 0), (0, 4), (4, 2), (2, 4), (4, 4), (5, 1), (1, 5), (5, 3)]
    dist_waves = torch.stack([
        torch.sin(2.0 * np.pi * (fx * xx + fy * yy) + 2.0 * np.pi * 0.37 * j)
        for j, (fx, fy) in enumerate(dist_freqs)
    ])
    a_sig, a_dist = 0.15, 0.25
    images = torch.empty(num_classes * per_class, C, H, W)
    labels = torch.empty(num_classes * per_class, dtype=torch.long)
    class_index: Dict[int, List[int]] = {}
    for c in range(num_classes):
        fx, fy = class_freqs[c % len(class_freqs)]
        phase = 2.0 * np.pi * 0.618 * c
        template = a_sig * torch.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
        class_index[c] = []
        for j in range(per_class):
            i = c * per_class + j
            u = (torch.rand(len(dist_freqs), generator=gen) * 2 - 1) * a_dist
            nuisance = (u[:, None, None] * dist_waves).sum(0)
            noise = (torch.rand(C, H, W, generator=gen) - 0.5) * 0.2  # amplitude 0.1
            base = 0.5 + template + nuisance
            images[i] = torch.clamp(base[None].expand(C, H, W) + noise, 0.0, 1.0)
            labels[i] = c
            class_index[c].append(i)
    ds = LabeledDataset(images, labels, class_index, dataset_id=f"blobs{num_classes}x{per_class}s{seed}")
    ds.validate()
    return ds


def split_classes(classes, counts: Tuple[int, int, int], seed: int) -> SplitSpec:
    """Shuffle ``classes`` and cut them into train/val/test of sizes ``counts``."""
    classes = sorted(classes)
    n_train, n_val, n_test = counts
    if n_train + n_val + n_test > len(classes):
        raise InputError("split counts exceed number of classes")
    gen = make_generator(seed)
    perm = torch.randperm(len(classes), generator=gen).tolist()
    shuffled = [classes[i] for i in perm]
    return SplitSpec(
        frozenset(shuffled[:n_train]),
        frozenset(shuffled[n_train:n_train + n_val]),
        frozenset(shuffled[n_train + n_val:n_train + n_val + n_test]),
    )


def write_split_file(split: SplitSpec, path, class_names=None) -> None:
    name = (lambda c: class_names[c]) if class_names else str
    with open(path, "w") as f:
        for key, cs in (("train", split.train_classes),
                        ("val", split.val_classes),
                        ("test", split.test_classes)):
            f.write(f"{key}: " + ",".join(sorted(name(c) for c in cs)) + "\n")


def read_split_file(path, class_ids=None) -> SplitSpec:
    """Parse the three-line ``train:/val:/test:`` split format.

    ``class_ids`` maps class name -> id; by default names are parsed as ints.
    """
    to_id = (lambda n: class_ids[n]) if class_ids else int
    found = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            key = key.strip()
            if key not in ("train", "val", "test"):
                raise DataIOError(f"unexpected split line {line!r} in {path}")
            names = [n.strip() for n in rest.split(",") if n.strip()]
            found[key] = frozenset(to_id(n) for n in names)
    for key in ("train", "val", "test"):
        if key not in found:
            raise DataIOError(f"split file {path} is missing the {key!r} line")
    return SplitSpec(found["train"], found["val"], found["test"])


def sample_episode_from_dataset(ds: LabeledDataset, classes, N: int, K: int, M: int,
                                rng: torch.Generator) -> Episode:
    """Sample a real N-way K-shot episode without replacement within classes."""
    classes = sorted(classes)
    if len(classes) < N:
        raise InputError(f"need {N} classes, got {len(classes)}")
    pick = torch.randperm(len(classes), generator=rng)[:N].tolist()
    chosen = [classes[i] for i in pick]
    sup_im, sup_lb, qry_im, qry_lb = [], [], [], []
    for local, cid in enumerate(chosen):
        idxs = ds.class_index[cid]
        if len(idxs) < K + M:
            raise InputError(f"class {cid} has {len(idxs)} items, needs {K + M}")
        perm = torch.randperm(len(idxs), generator=rng).tolist()
        for j in perm[:K]:
            sup_im.append(ds.images[idxs[j]])
            sup_lb.append(local)
        for j in perm[K:K + M]:
            qry_im.append(ds.images[idxs[j]])
            qry_lb.append(local)
    return Episode(
        torch.stack(sup_im), torch.tensor(sup_lb, dtype=torch.long),
        torch.stack(qry_im), torch.tensor(qry_lb, dtype=torch.long),
        way=N, shots=K, queries_per_class=M, origin="real",
        source_class_ids=tuple(chosen),
    )
