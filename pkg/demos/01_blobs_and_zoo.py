"""Synthetic blob datasets and a frozen model zoo.

Builds the 12-class blob dataset used throughout the demos, splits its
classes into meta-train / meta-test pools, pre-trains a small zoo of 2-way
classifiers on the meta-train classes, and saves the zoo to disk. Everything
downstream (inversion, meta-training, evaluation) only ever touches the
frozen zoo — never the images it was trained on.
"""

import pathlib

from dfml.data import make_synthetic_blobs, split_classes, write_split_file
from dfml.seeding import make_generator
from dfml.zoo import build_zoo, save_zoo

OUT = pathlib.Path(__file__).parent / "out" / "zoo"
OUT.mkdir(parents=True, exist_ok=True)

# 12 classes of 16x16 RGB blobs, 20 images each. Each class is a Gaussian
# bump at a class-specific location plus a class-specific sinusoidal texture.
ds = make_synthetic_blobs(num_classes=12, per_class=20, shape=(3, 16, 16), seed=0)
print(f"dataset: {ds.images.shape[0]} images, {len(ds.classes)} classes, "
      f"pixel range [{ds.images.min():.2f}, {ds.images.max():.2f}]")

# 8 classes for pre-training the zoo, 4 held out for few-shot evaluation.
split = split_classes(ds.classes, counts=(8, 0, 4), seed=0)
write_split_file(split, OUT / "split.txt")
print(f"split: train={sorted(split.train_classes)} test={sorted(split.test_classes)}")

# Four conv4 models, each trained on a random 2-way subset of the train
# classes ("SS" = same architecture, same dataset scenario). Each model must
# reach 95% train accuracy or zoo construction fails loudly.
zoo = build_zoo([ds], [split], num_models=4, way=2, scenario="SS",
                epochs=30, rng=make_generator(0))
for i, entry in enumerate(zoo.entries):
    print(f"model {i}: arch={entry.spec.arch_id} "
          f"global pseudo-classes={entry.global_class_ids}")

save_zoo(zoo, OUT)
print(f"saved zoo to {OUT} (manifest + one checkpoint per entry)")
