"""Model inversion: recover class-representative images from a frozen model.

Loads the zoo saved by demo 01 (building it if needed), then optimizes a
dynamic pseudo-image bank against the frozen models: cross-entropy toward
each image's assigned pseudo-class, total-variation and l2 priors, and a
BN-statistic matching term that pulls the batch statistics of the synthetic
images toward the running statistics the models stored during pre-training.
Dumps the bank as PNG grids before and after, and reports how many pseudo
images the owning models classify as their assigned labels.
"""

import pathlib
import runpy

import torch

from dfml.inversion import (InversionWeights, dataset_step, dump_images,
                            init_dynamic_dataset, inversion_loss)
from dfml.nets import forward
from dfml.zoo import load_zoo

HERE = pathlib.Path(__file__).parent
ZOO_DIR = HERE / "out" / "zoo"
OUT = HERE / "out" / "inversion"
OUT.mkdir(parents=True, exist_ok=True)

if not (ZOO_DIR / "manifest.txt").exists():
    runpy.run_path(str(HERE / "01_blobs_and_zoo.py"))
zoo = load_zoo(ZOO_DIR)

# One support + one query instance per global pseudo-class, initialized from
# Gaussian noise.
dd = init_dynamic_dataset(zoo, K=1, M=1, shape=zoo.input_shape, seed=0)
weights = InversionWeights(alpha_tv=1e-4, alpha_l2=1e-5, feature_weight=1.0)


def assigned_label_accuracy(dd):
    """Fraction of bank images the owning model classifies as assigned."""
    hits = total = 0
    for gid in range(dd.num_classes):
        entry = zoo.entries[dd.class_owner[gid]]
        logits = forward(entry.params, dd.images[gid].detach(), "running_stats").logits
        hits += int((logits.argmax(1) == dd.assigned_labels[gid]).sum())
        total += logits.shape[0]
    return hits / total


dump_images(dd, OUT / "step_0000")
print(f"step    0: assigned-label accuracy {assigned_label_accuracy(dd):.2f}")

for step in range(1, 201):
    loss = inversion_loss(zoo, dd, weights)
    (grad,) = torch.autograd.grad(loss, dd.images)
    dd = dataset_step(dd, grad)
    if step % 50 == 0:
        print(f"step {step:4d}: inversion loss {loss.item():8.3f}, "
              f"assigned-label accuracy {assigned_label_accuracy(dd):.2f}")

dump_images(dd, OUT / "step_0200")
print(f"wrote pseudo-image grids to {OUT}/step_0000 and {OUT}/step_0200")
