"""Few-shot evaluation: meta-trained vs random init, with calibration.

Uses the initialization trained by demo 03 (running it if needed) and scores
2-way 1-shot tasks drawn from the held-out classes, three ways:

  * random init  — fresh network, adapt on the support, fit a head;
  * meta init    — the trained initialization, no test-time calibration;
  * meta + ICFIL — additionally synthesize pseudo supports from each
    adapted model, take one contrastive calibration step on the backbone,
    and refit the linear head.

Writes one report JSON per variant.
"""

import dataclasses
import pathlib
import runpy

from dfml.icfil import write_eval_report
from dfml.runner import Ablation, ExperimentConfig, Seeds, run_evaluation

HERE = pathlib.Path(__file__).parent
OUT = HERE / "out" / "train"

cfg = ExperimentConfig(
    output_dir=str(OUT),
    total_iterations=300,
    checkpoint_every=100,
    eval_num_tasks=50,
    ablation=Ablation(curriculum=True, icfil=False),
    seeds=Seeds(zoo=0, dataset=0, train=0, eval=0),
)
cfg.hp.lam = 0.5
cfg.hp.curriculum_start_iter = 100

if not (OUT / "theta_final.ckpt").exists():
    runpy.run_path(str(HERE / "03_meta_train.py"))

reports = {}
reports["random"] = run_evaluation(cfg, theta_source="random")
reports["meta"] = run_evaluation(cfg, theta_source="purer")
icfil_cfg = dataclasses.replace(cfg, ablation=Ablation(curriculum=True, icfil=True))
reports["meta+icfil"] = run_evaluation(icfil_cfg, theta_source="purer")

print(f"{cfg.eval_num_tasks} tasks, 2-way 1-shot, held-out classes:")
for name, rep in reports.items():
    print(f"  {name:11s} mean={rep.mean:.3f}  std={rep.std:.3f}  "
          f"95% CI ±{rep.ci95:.3f}")
    write_eval_report(rep, OUT / f"report_{name}.json")
print(f"reports written to {OUT}/report_*.json")
