"""A tiny end-to-end training run with the curriculum enabled.

Runs the full loop — inversion step, curriculum feedback, meta update — for
300 iterations at desk scale, then renders the loss / accuracy / switch
plots from the metrics CSV. Short enough to finish in about a minute on a
laptop CPU; the acceptance-grade configuration simply raises
total_iterations to 1500 and curriculum_start_iter to 500.
"""

import pathlib

from dfml.runner import (Ablation, ExperimentConfig, Seeds, emit_plots,
                         run_meta_training)

OUT = pathlib.Path(__file__).parent / "out" / "train"

cfg = ExperimentConfig(
    output_dir=str(OUT),
    total_iterations=300,
    checkpoint_every=100,
    eval_num_tasks=50,
    ablation=Ablation(curriculum=True, icfil=False),
    seeds=Seeds(zoo=0, dataset=0, train=0, eval=0),
)
cfg.hp.lam = 0.5                 # adversarial-ascent weight once the switch flips
cfg.hp.curriculum_start_iter = 100  # warm-up gate before the monitor may fire

print(f"training {cfg.total_iterations} iterations "
      f"(curriculum gate at {cfg.hp.curriculum_start_iter})...")
run_meta_training(cfg)

csv_path = OUT / "train_metrics.csv"
rows = csv_path.read_text().strip().splitlines()
print(f"metrics: {len(rows) - 1} rows in {csv_path}")
print("  header:", rows[0])
print("  last:  ", rows[-1])

figures = emit_plots(csv_path, OUT / "plots")
print("plots:", ", ".join(str(p) for p in figures))
print(f"checkpoints + final initialization in {OUT}")
