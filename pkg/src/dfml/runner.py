"""Experiment orchestration: config parsing, the full training loop,
checkpointing, baselines, ablations and plot emission."""

import csv
import dataclasses
import hashlib
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import torch

from . import curriculum, episodic, icfil, inversion, nets, zoo as zoo_mod
from .data import (LabeledDataset, SplitSpec, load_dataset, make_synthetic_blobs,
                   read_split_file, split_classes)
from .episodic import HyperParams, MetaState
from .errors import ConfigError, DataIOError, ScenarioError
from .icfil import EvalReport, IcfilConfig
from .inversion import DynamicDataset, InversionWeights
from .seeding import derive_seed, make_generator

CSV_COLUMNS = ["iteration", "inv_loss", "batch_outer_loss", "batch_train_acc",
               "feedback", "switch", "curriculum_active", "wall_ms"]


@dataclass
class Ablation:
    curriculum: bool = True
    icfil: bool = True


@dataclass
class Seeds:
    zoo: int = 0
    dataset: int = 0
    train: int = 0
    eval: int = 0


@dataclass
class ExperimentConfig:
    scenario: str = "SS"
    dataset_paths: tuple = ()          # empty -> synthetic blobs
    image_shape: tuple = (3, 16, 16)
    synthetic_classes: int = 12
    synthetic_per_class: int = 20
    split_counts: tuple = (8, 0, 4)
    zoo_size: int = 4
    zoo_epochs: int = 30
    width_multiplier: float = 1.0
    total_iterations: int = 1500
    eval_num_tasks: int = 100
    checkpoint_every: int = 500
    parallel_eval: int = 1
    output_dir: str = "runs/out"
    hp: HyperParams = field(default_factory=lambda: HyperParams(
        way=2, shots=1, queries=1, curriculum_start_iter=500))
    weights: InversionWeights = field(default_factory=InversionWeights)
    icfil: IcfilConfig = field(default_factory=IcfilConfig)
    ablation: Ablation = field(default_factory=Ablation)
    seeds: Seeds = field(default_factory=Seeds)

    def validate(self):
        if self.scenario not in zoo_mod.SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.ablation.curriculum and self.total_iterations <= self.hp.curriculum_start_iter:
            raise ConfigError("total_iterations must exceed curriculum_start_iter "
                              "when the curriculum is enabled")
        for p in self.dataset_paths:
            if not os.path.isdir(p):
                raise ConfigError(f"dataset path {p} does not exist")


# --- flat key-value config format ----------------------------------------

_SECTIONS = {
    "": None, "hp": "hp", "weights": "weights", "icfil": "icfil",
    "ablation": "ablation", "seeds": "seeds",
}
# keys named after the quantity they set, not the dataclass attribute
_FIELD_ALIASES = {("hp", "lambda"): "lam"}
_SKIP_FIELDS = {("icfil", "inversion_weights"), ("icfil", "seed")}


def _field_key(section: str, name: str) -> str:
    for (sec, key), attr in _FIELD_ALIASES.items():
        if sec == section and attr == name:
            return key
    return name


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, ref):
    text = text.strip()
    try:
        if isinstance(ref, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(ref, int):
            return int(text)
        if isinstance(ref, float):
            return float(text)
        if isinstance(ref, tuple):
            if not text:
                return ()
            parts = [p.strip() for p in text.split(",")]
            if not ref or isinstance(ref[0], str):
                return tuple(parts)  # string tuples (paths)
            return tuple(int(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse value {text!r}") from exc


def _iter_config_fields(cfg: ExperimentConfig):
    for section, attr in _SECTIONS.items():
        obj = cfg if attr is None else getattr(cfg, attr)
        for f in dataclasses.fields(obj):
            if attr is None and f.name in ("hp", "weights", "icfil", "ablation", "seeds"):
                continue
            if (section, f.name) in _SKIP_FIELDS:
                continue
            key = (section + "." if section else "") + _field_key(section, f.name)
            yield key, obj, f.name


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"{key} = {_format_value(getattr(obj, name))}"
             for key, obj, name in _iter_config_fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = base if base is not None else ExperimentConfig()
    cfg = replace(cfg, hp=replace(cfg.hp), weights=replace(cfg.weights),
                  icfil=replace(cfg.icfil), ablation=replace(cfg.ablation),
                  seeds=replace(cfg.seeds))
    table = {key: (obj, name) for key, obj, name in _iter_config_fields(cfg)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in table:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        obj, name = table[key]
        setattr(obj, name, _parse_value(val, getattr(obj, name)))
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.blake2b(serialize_config(cfg).encode(), digest_size=8).hexdigest()


def load_config_file(path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


# --- data and zoo plumbing -------------------------------------------------

def load_experiment_data(cfg: ExperimentConfig) -> List[Tuple[LabeledDataset, SplitSpec]]:
    out = []
    if cfg.dataset_paths:
        for path in cfg.dataset_paths:
            ds = load_dataset(path, cfg.image_shape)
            split_file = os.path.join(path, "split.txt")
            if os.path.isfile(split_file):
                class_dirs = sorted(d for d in os.listdir(path)
                                    if os.path.isdir(os.path.join(path, d)))
                name_to_id = {n: i for i, n in enumerate(class_dirs)}
                split = read_split_file(split_file, name_to_id)
            else:
                split = split_classes(ds.classes, cfg.split_counts, cfg.seeds.dataset)
            out.append((ds, split))
    else:
        ds = make_synthetic_blobs(cfg.synthetic_classes, cfg.synthetic_per_class,
                                  cfg.image_shape, cfg.seeds.dataset)
        split = split_classes(ds.classes, cfg.split_counts, cfg.seeds.dataset)
        out.append((ds, split))
    return out


def get_or_build_zoo(cfg: ExperimentConfig, data=None) -> zoo_mod.ModelZoo:
    zoo_dir = os.path.join(cfg.output_dir, "zoo")
    if os.path.isfile(os.path.join(zoo_dir, "manifest.txt")):
        return zoo_mod.load_zoo(zoo_dir)
    data = data or load_experiment_data(cfg)
    rng = make_generator(cfg.seeds.zoo)
    z = zoo_mod.build_zoo([d for d, _ in data], [s for _, s in data], cfg.zoo_size,
                          cfg.hp.way, cfg.scenario, cfg.zoo_epochs, rng,
                          width_multiplier=cfg.width_multiplier)
    zoo_mod.save_zoo(z, zoo_dir)
    return z


# --- run-state checkpointing ----------------------------------------------

def _save_run_state(path, cfg, state: MetaState, dd: DynamicDataset,
                    mon: curriculum.FeedbackMonitor) -> None:
    torch.save({
        "config": serialize_config(cfg),
        "spec": dataclasses.asdict(state.theta.spec),
        "theta_entries": {k: v.detach().clone() for k, v in state.theta.entries.items()},
        "theta_buffers": {k: v.detach().clone() for k, v in state.theta.buffers.items()},
        "adam": state.optimizer.state_dict(),
        "iteration": state.iteration,
        "curriculum_active": state.curriculum_active,
        "dd_images": dd.images.detach().clone(),
        "dd_owner": dd.class_owner,
        "dd_labels": dd.assigned_labels,
        "dd_shots": dd.shots,
        "dd_queries": dd.queries,
        "dd_m": dd.opt_m.clone(),
        "dd_v": dd.opt_v.clone(),
        "dd_step": dd.opt_step,
        "monitor": dataclasses.asdict(mon),
    }, path)


def _load_run_state(path, hp: HyperParams):
    try:
        blob = torch.load(path, weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise DataIOError(f"cannot load run state {path}: {exc}") from exc
    spec = nets.ArchSpec(**blob["spec"])
    theta = nets.build_network(spec, 0)
    for k in theta.entries:
        theta.entries[k] = blob["theta_entries"][k].clone().requires_grad_(True)
    for k in theta.buffers:
        theta.buffers[k] = blob["theta_buffers"][k].clone()
    from .optim import Adam
    opt = Adam(theta.entries, lr=hp.alpha_outer)
    opt.load_state_dict(blob["adam"])
    state = MetaState(theta, opt, blob["iteration"], blob["curriculum_active"])
    images = blob["dd_images"].clone().requires_grad_(True)
    dd = DynamicDataset(images, blob["dd_owner"], blob["dd_labels"],
                        blob["dd_shots"], blob["dd_queries"],
                        opt_m=blob["dd_m"].clone(), opt_v=blob["dd_v"].clone(),
                        opt_step=blob["dd_step"])
    mon = curriculum.FeedbackMonitor(**blob["monitor"])
    return state, dd, mon


# --- training loop ----------------------------------------------------------

def run_meta_training(cfg: ExperimentConfig,
                      resume_from: Optional[str] = None) -> Tuple[MetaState, str]:
    """Full training loop: dataset update -> episode batch -> meta update ->
    feedback, with periodic checkpoints. Returns the final state and the
    metrics CSV path."""
    cfg.validate()
    os.makedirs(cfg.output_dir, exist_ok=True)
    data = load_experiment_data(cfg)
    z = get_or_build_zoo(cfg, data)
    hp = cfg.hp

    if resume_from:
        state, dd, mon = _load_run_state(resume_from, hp)
    else:
        spec = nets.ArchSpec("conv4", cfg.image_shape, hp.way, cfg.width_multiplier)
        state = episodic.init_meta_state(spec, derive_seed(cfg.seeds.train, "theta"), hp)
        dd = inversion.init_dynamic_dataset(z, hp.shots, hp.queries, cfg.image_shape,
                                            derive_seed(cfg.seeds.train, "dd"))
        mon = curriculum.FeedbackMonitor(patience=hp.patience, metric=hp.feedback_metric)

    csv_path = os.path.join(cfg.output_dir, "train_metrics.csv")
    mode = "a" if (resume_from and os.path.isfile(csv_path)) else "w"
    with open(csv_path, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(CSV_COLUMNS)
        while state.iteration < cfg.total_iterations:
            t0 = time.perf_counter()
            i = state.iteration
            active = state.curriculum_active and cfg.ablation.curriculum
            switch = curriculum.gradient_switch(mon.last_omega, active)
            rng = make_generator(derive_seed(cfg.seeds.train, "iter", i))
            dd, losses = curriculum.eci_dataset_update(dd, z, state, hp, switch, rng,
                                                       cfg.weights)
            episodes = [episodic.sample_pseudo_episode(dd, hp.way, hp.shots, hp.queries,
                                                       rng, hp.within_model_tasks)
                        for _ in range(hp.episode_batch)]
            state, outer, acc = episodic.meta_update(state, episodes, hp)
            metric = acc if hp.feedback_metric == "accuracy" else outer
            mon, omega = curriculum.feedback_update(mon, metric)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            writer.writerow([state.iteration, repr(losses["inv_loss"]), repr(outer),
                             repr(acc), int(omega == curriculum.POSITIVE), switch,
                             int(active), f"{wall_ms:.3f}"])
            if state.iteration % cfg.checkpoint_every == 0:
                _save_run_state(os.path.join(cfg.output_dir, f"run_{state.iteration:06d}.pt"),
                                cfg, state, dd, mon)

    _save_run_state(os.path.join(cfg.output_dir, "run_final.pt"), cfg, state, dd, mon)
    nets.save_checkpoint(state.theta, os.path.join(cfg.output_dir, "theta_final.ckpt"))
    return state, csv_path


# --- evaluation --------------------------------------------------------------

def run_evaluation(cfg: ExperimentConfig, theta_source: str = "purer") -> EvalReport:
    """Evaluate an initialization over sampled target tasks.

    ``theta_source`` selects the trained meta init, a random init or the
    zoo parameter average. ICFIL is applied only to the trained init and
    only when enabled in the ablation flags."""
    cfg.validate()
    data = load_experiment_data(cfg)
    spec = nets.ArchSpec("conv4", cfg.image_shape, cfg.hp.way, cfg.width_multiplier)
    if theta_source == "purer":
        path = os.path.join(cfg.output_dir, "theta_final.ckpt")
        if not os.path.isfile(path):
            raise DataIOError(f"no trained initialization at {path}; run meta-train first")
        theta = nets.load_checkpoint(path)
    elif theta_source == "random":
        theta = zoo_mod.random_init_baseline(spec, cfg.seeds.eval)
    elif theta_source == "average":
        if cfg.scenario != "SS":
            raise ScenarioError("the average baseline is defined only for the SS scenario")
        theta = zoo_mod.average_models(get_or_build_zoo(cfg, data))
    else:
        raise ConfigError(f"unknown theta_source {theta_source!r}")

    use_icfil = cfg.ablation.icfil and theta_source == "purer"
    splits = [(ds, split.test_classes) for ds, split in data]
    rng = make_generator(cfg.seeds.eval)
    icfil_cfg = replace(cfg.icfil, inversion_weights=cfg.weights)
    report = icfil.evaluate(theta, splits, cfg.hp.way, cfg.hp.shots, cfg.hp.queries,
                            cfg.eval_num_tasks, use_icfil, rng,
                            alpha_inner=cfg.hp.alpha_inner, icfil_cfg=icfil_cfg,
                            parallel=cfg.parallel_eval)
    report.metadata["theta_source"] = theta_source
    report.metadata["config_hash"] = config_hash(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    out = os.path.join(cfg.output_dir, f"eval_{theta_source}.json")
    icfil.write_eval_report(report, out, {"hash": config_hash(cfg),
                                          "text": serialize_config(cfg)})
    return report


# --- plots -------------------------------------------------------------------

def _read_metrics(csv_path) -> Dict[str, list]:
    cols: Dict[str, list] = {c: [] for c in CSV_COLUMNS}
    try:
        f = open(csv_path, newline="")
    except OSError as exc:
        raise DataIOError(f"cannot read metrics {csv_path}: {exc}") from exc
    with f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise ConfigError(f"{csv_path} line 1: unexpected header {header!r}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(CSV_COLUMNS):
                raise ConfigError(f"{csv_path} line {lineno}: expected "
                                  f"{len(CSV_COLUMNS)} fields, got {len(row)}")
            try:
                for c, v in zip(CSV_COLUMNS, row):
                    cols[c].append(float(v))
            except ValueError as exc:
                raise ConfigError(f"{csv_path} line {lineno}: {exc}") from exc
    return cols


def ema(series, factor=0.9):
    out = []
    for x in series:
        out.append(x if not out else factor * out[-1] + (1 - factor) * x)
    return out


def emit_plots(metrics_csv, out_dir) -> List[str]:
    """Emit training-curve, feedback-raster and inversion-loss figures."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = _read_metrics(metrics_csv)
    os.makedirs(out_dir, exist_ok=True)
    it = cols["iteration"]
    meta = {"Software": "dfml"}  # keep output bytes independent of environment
    paths = []

    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(it, cols["batch_outer_loss"], alpha=0.3, color="C0")
    ax1.plot(it, ema(cols["batch_outer_loss"]), color="C0", label="outer loss (EMA)")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("outer loss")
    ax2 = ax1.twinx()
    ax2.plot(it, cols["batch_train_acc"], alpha=0.3, color="C1")
    ax2.plot(it, ema(cols["batch_train_acc"]), color="C1", label="train acc (EMA)")
    ax2.set_ylabel("batch train accuracy")
    fig.legend(loc="upper right")
    p = os.path.join(out_dir, "training_curves.png")
    fig.savefig(p, dpi=100, metadata=meta)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(7, 2))
    ax.imshow([cols["feedback"], cols["switch"]], aspect="auto",
              interpolation="nearest", cmap="Greys")
    ax.set_yticks([0, 1], ["feedback", "switch"])
    ax.set_xlabel("iteration")
    p = os.path.join(out_dir, "feedback_raster.png")
    fig.savefig(p, dpi=100, metadata=meta)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(it, cols["inv_loss"], color="C2")
    ax.set_xlabel("iteration")
    ax.set_ylabel("inversion loss")
    p = os.path.join(out_dir, "inversion_loss.png")
    fig.savefig(p, dpi=100, metadata=meta)
    plt.close(fig)
    paths.append(p)
    return paths


# --- ablation matrix ----------------------------------------------------------

def run_ablation(cfg: ExperimentConfig) -> Dict[str, float]:
    """Train EI and ECI variants and evaluate each with and without ICFIL.

    Returns mean accuracy per cell of the 2x2 matrix."""
    results = {}
    base_out = cfg.output_dir
    for label, use_curriculum in (("EI", False), ("ECI", True)):
        sub = replace(cfg, output_dir=os.path.join(base_out, label),
                      ablation=replace(cfg.ablation, curriculum=use_curriculum))
        run_meta_training(sub)
        for icfil_label, use_icfil in (("-ICFIL", False), ("+ICFIL", True)):
            sub2 = replace(sub, ablation=replace(sub.ablation, icfil=use_icfil))
            report = run_evaluation(sub2, "purer")
            results[f"{label}{icfil_label}"] = report.mean
    summary = os.path.join(base_out, "ablation_summary.csv")
    os.makedirs(base_out, exist_ok=True)
    with open(summary, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "mean_accuracy"])
        for k, v in results.items():
            writer.writerow([k, repr(v)])
    return results
