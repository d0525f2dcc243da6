"""Subcommand runs: each builds its inputs from the config, writes results
into its run directory, and returns the paths it wrote."""
from __future__ import annotations
import copy, csv, logging, time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import plots
from .config import RunConfig
from .ctm_distill import load_student, new_student, save_student, train_student
from .data.mixture import ConditionedMixture, blob_mixture, from_spec, smooth_signal_mixture
from .diffusion import karras_grid
from .errors import CheckpointError, ConfigError
from .guidance import GuidanceTarget, intensity_feature, run_method
from .metrics import (balanced_labels, bayes_accuracy, condition_accuracy, energy_distance, preservation_sweep,
                      tradeoff_report)
from .sampler import draw_initial_noise, chain_rngs, sample
from .solver import generate
from .teacher import AnalyticTeacher, Teacher, denoiser_gap, load_teacher, save_teacher, train_teacher
from .utils import (config_hash, elapsed_ms, make_rng, make_run_dir, save_json, set_deterministic,
                    write_manifest)

logger = logging.getLogger(__name__)

# rng stream keys, one per purpose
STREAM_DATA = 1
STREAM_TEACHER = 2
STREAM_DISTILL = 3
STREAM_REFERENCE = 4
STREAM_HOLDOUT = 5


@dataclass
class Run:
    cfg: RunConfig
    subcommand: str
    flags: Dict[str, Any]
    run_dir: Path
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def finish(self) -> Path:
        return save_json(self.path("timings.json"), self.timings)


def start_run(cfg: RunConfig, subcommand: str, flags: Dict[str, Any]) -> Run:
    set_deterministic(cfg.seed)
    cfg_dict = cfg.to_dict()
    run_dir = make_run_dir(cfg.output_dir, config_hash(cfg_dict), subcommand)
    write_manifest(run_dir, cfg_dict, cfg.seed, subcommand, flags)
    logger.info("%s: run directory %s", subcommand, run_dir)
    return Run(cfg=cfg, subcommand=subcommand, flags=flags, run_dir=run_dir)


def write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


# ---------------- Inputs ----------------
def build_mixture(cfg: RunConfig) -> ConditionedMixture:
    d = cfg.data
    rng = make_rng(cfg.seed, STREAM_DATA)
    if d.kind == "blobs":
        mix = blob_mixture(d.dim, d.num_labels, d.components, rng, comp_std=d.comp_std)
    elif d.kind == "signal":
        mix = smooth_signal_mixture(d.dim, d.num_labels, d.components, rng, noise_std=d.noise_std)
    else:
        mix = from_spec(d.mixture)
    return mix.standardized(cfg.schedule.sigma_data) if d.standardize else mix


def build_teacher(cfg: RunConfig, mixture: ConditionedMixture, teacher_path: Optional[str]) -> Teacher:
    if cfg.teacher.kind == "analytic":
        return AnalyticTeacher(mixture, cfg.schedule.sigma_data)
    if not teacher_path:
        raise ConfigError("--teacher", "a teacher checkpoint is required when teacher.kind = neural")
    return load_teacher(teacher_path)


def require_student(student_path: Optional[str]):
    if not student_path:
        raise CheckpointError("<none>", "no student checkpoint given (--student)")
    return load_student(student_path)


def reference_set(cfg: RunConfig, mixture: ConditionedMixture, num: int):
    labels = balanced_labels(num, mixture.num_labels)
    x, _ = mixture.sample(num, make_rng(cfg.seed, STREAM_REFERENCE), labels=labels)
    return x, labels


def _coords(x: torch.Tensor) -> Dict[str, float]:
    return {f"x{j}": float(v) for j, v in enumerate(x.tolist())}


# ---------------- Subcommands ----------------
def run_train_teacher(run: Run) -> List[Path]:
    cfg = run.cfg
    mixture = build_mixture(cfg)
    if cfg.teacher.kind == "analytic":
        raise ConfigError("teacher.kind", "the analytic teacher needs no training")
    start = time.perf_counter()
    teacher = train_teacher(mixture, cfg.schedule, cfg.teacher.train_config(), make_rng(cfg.seed, STREAM_TEACHER),
                            log_path=run.path("teacher_log.jsonl"))
    run.timings["train_ms"] = elapsed_ms(start)
    ckpt = save_teacher(teacher, run.path("teacher.safetensors"))
    gap = denoiser_gap(teacher, AnalyticTeacher(mixture, cfg.schedule.sigma_data), mixture, cfg.schedule,
                       make_rng(cfg.seed, STREAM_HOLDOUT))
    report = {"denoiser_mse": gap, "sigma_data_sq": cfg.schedule.sigma_data ** 2,
              "relative": gap / cfg.schedule.sigma_data ** 2}
    logger.info("teacher vs analytic denoiser: mse=%.4g (%.3g sigma_data^2)", gap, report["relative"])
    return [ckpt, save_json(run.path("teacher_report.json"), report)]


def run_distill(run: Run, teacher_path: Optional[str]) -> List[Path]:
    cfg = run.cfg
    mixture = build_mixture(cfg)
    teacher = build_teacher(cfg, mixture, teacher_path)
    start = time.perf_counter()
    student, rows = train_student(teacher, mixture, cfg.schedule, cfg.distill_config(),
                                  make_rng(cfg.seed, STREAM_DISTILL), log_path=run.path("train_log.jsonl"),
                                  checkpoint_path=run.path("student_last_good.safetensors"))
    run.timings["train_ms"] = elapsed_ms(start)
    out = [save_student(student, run.path("student.safetensors")), run.path("train_log.jsonl")]
    if run.flags.get("plot") and rows:
        out.append(plots.loss_curves(run.path("loss_curves.svg"), rows))
    return out


SAMPLE_COLUMNS = ["seed", "chain", "label", "omega", "nu", "gamma", "steps"]


def run_sample(run: Run, student_path: Optional[str]) -> List[Path]:
    cfg = run.cfg
    student = require_student(student_path)
    scfg = cfg.sampler_config()
    start = time.perf_counter()
    x, _ = sample(student, scfg)
    run.timings["sample_ms"] = elapsed_ms(start)
    rows = []
    for i, xi in enumerate(x):
        row = {"seed": scfg.seed, "chain": i, "label": scfg.label, "omega": scfg.omega, "nu": scfg.nu,
               "gamma": scfg.gamma, "steps": scfg.steps}
        row.update(_coords(xi))
        rows.append(row)
    coords = [f"x{j}" for j in range(student.data_dim)]
    out = [write_csv(run.path("samples.csv"), SAMPLE_COLUMNS + coords, rows)]
    if run.flags.get("plot") and student.data_dim == 2:
        ref, _ = reference_set(cfg, build_mixture(cfg), 2000)
        out.append(plots.scatter_samples(run.path("samples.svg"), x.numpy(), np.full(len(x), scfg.label),
                                         reference=ref.numpy(), title=f"{scfg.steps}-step samples"))
    return out


TRADEOFF_COLUMNS = ["steps", "omega", "nu", "energy_distance", "condition_accuracy", "preservation_vs_1step"]
PRESERVATION_COLUMNS = ["gamma", "steps_a", "steps_b", "preservation"]


def run_eval(run: Run, student_path: Optional[str], teacher_path: Optional[str]) -> List[Path]:
    cfg = run.cfg
    ev = cfg.eval
    mixture = build_mixture(cfg)
    student = require_student(student_path)
    reference, _ = reference_set(cfg, mixture, ev.num_reference)
    base = cfg.sampler_config(num_samples=ev.num_samples, gamma=0.0)
    rows, walls = tradeoff_report(student, mixture, reference, ev.steps_list, ev.settings, base)
    for row, ms in zip(rows, walls):
        run.timings[f"sample_ms[steps={row['steps']},omega={row['omega']},nu={row['nu']}]"] = ms
    out = [write_csv(run.path("tradeoff.csv"), TRADEOFF_COLUMNS, rows)]

    omega, nu = ev.settings[0]
    first = replace(base, omega=float(omega), nu=float(nu))
    labels = balanced_labels(ev.num_samples, mixture.num_labels)

    # untrained baseline and teacher reference share the sampler's chain noise
    noise = draw_initial_noise(student, chain_rngs(cfg.seed, range(ev.num_samples)))
    teacher = build_teacher(cfg, mixture, teacher_path)
    untrained = new_student(teacher, mixture, cfg.schedule, cfg.distill_config())
    x_untrained, _ = sample(untrained, replace(first, steps=1), initial_noise=noise, labels=labels)
    x_teacher = generate(teacher, noise, labels, float(omega), karras_grid(cfg.schedule, ev.teacher_steps + 1))

    pres_noise = noise[: ev.preservation_samples]
    pres = preservation_sweep(student, first, pres_noise, labels[: ev.preservation_samples],
                              steps_a=ev.preservation_steps[0], steps_b=ev.preservation_steps[1], gammas=ev.gammas)
    out.append(write_csv(run.path("preservation.csv"), PRESERVATION_COLUMNS, pres))

    one = next((r for r in rows if r["steps"] == 1 and r["omega"] == float(omega) and r["nu"] == float(nu)), None)
    summary = {
        "student_energy_distance_1step": one["energy_distance"] if one else None,
        "untrained_energy_distance_1step": energy_distance(x_untrained, reference),
        "teacher_energy_distance": energy_distance(x_teacher, reference),
        "teacher_steps": ev.teacher_steps,
        "teacher_condition_accuracy": condition_accuracy(x_teacher, labels, mixture),
        "bayes_accuracy": bayes_accuracy(mixture, ev.num_reference, make_rng(cfg.seed, STREAM_HOLDOUT)),
    }
    out.append(save_json(run.path("eval_summary.json"), summary))
    logger.info("eval: student 1-step ED=%s, teacher ED=%.4g, untrained ED=%.4g",
                summary["student_energy_distance_1step"], summary["teacher_energy_distance"],
                summary["untrained_energy_distance_1step"])
    return out


GUIDE_COLUMNS = ["seed", "chain", "shape", "method", "mse", "nll"]
GUIDE_SUMMARY_COLUMNS = ["shape", "method", "mean_mse", "mean_nll", "energy_distance"]


def run_guide(run: Run, student_path: Optional[str], shape: Optional[str] = None,
              method: Optional[str] = None) -> List[Path]:
    cfg = run.cfg
    mixture = build_mixture(cfg)
    student = require_student(student_path)
    gcfg, window = cfg.guidance_config(mixture.dim)
    shapes = [shape] if shape else list(cfg.guidance.shapes)
    methods = [method] if method else list(cfg.guidance.methods)
    chains = list(range(cfg.guidance.chains))
    labels = torch.full((len(chains),), cfg.guidance.label, dtype=torch.long)
    reference, _ = mixture.sample(len(chains), make_rng(cfg.seed, STREAM_REFERENCE), labels=labels)
    rows, summary, out = [], [], []
    for shp in shapes:
        target = GuidanceTarget.from_shape(shp, mixture.dim, window, cfg.guidance.db_low, cfg.guidance.db_high)
        curves = {}
        for mth in methods:
            start = time.perf_counter()
            result = run_method(mth, student, target, gcfg, labels=labels, chain_ids=chains)
            run.timings[f"guide_ms[{shp},{mth}]"] = elapsed_ms(start)
            x = result.sample
            mse = target.loss(x)
            nll = -mixture.log_prob(x, labels)
            for i, c in enumerate(chains):
                rows.append({"seed": cfg.seed, "chain": c, "shape": shp, "method": mth,
                             "mse": float(mse[i]), "nll": float(nll[i])})
            summary.append({"shape": shp, "method": mth, "mean_mse": float(mse.mean()),
                            "mean_nll": float(nll.mean()), "energy_distance": energy_distance(x, reference)})
            curves[mth] = intensity_feature(x, window).numpy()
            logger.info("guide[%s/%s]: mse=%.4g", shp, mth, float(mse.mean()))
        if run.flags.get("plot"):
            out.append(plots.intensity_overlay(run.path(f"guide_{shp}.svg"), target.curve.numpy(), curves, shp))
    out.insert(0, write_csv(run.path("guide.csv"), GUIDE_COLUMNS, rows))
    out.insert(1, write_csv(run.path("guide_summary.csv"), GUIDE_SUMMARY_COLUMNS, summary))
    return out


ABLATION_COLUMNS = ["distance", "energy_distance_1step", "untrained_energy_distance_1step", "improvement",
                    "final_loss_ctm"]


def run_ablate_distance(run: Run, teacher_path: Optional[str]) -> List[Path]:
    """Distill once per distance mode from the same seed; compare 1-step energy distances."""
    cfg = run.cfg
    ab = cfg.ablation
    mixture = build_mixture(cfg)
    teacher = build_teacher(cfg, mixture, teacher_path)
    reference, _ = reference_set(cfg, mixture, ab.num_samples)
    labels = balanced_labels(ab.num_samples, mixture.num_labels)
    scfg = cfg.sampler_config(num_samples=ab.num_samples, steps=1, gamma=0.0)
    overrides = {"iterations": ab.iterations} if ab.iterations else {}
    rows = []
    # one initialisation shared by every distance mode
    baseline = new_student(teacher, mixture, cfg.schedule, cfg.distill_config(**overrides))
    x0, _ = sample(baseline, scfg, labels=labels)
    for distance in ab.distances:
        dcfg = cfg.distill_config(distance=distance, **overrides)
        start = time.perf_counter()
        student, log = train_student(teacher, mixture, cfg.schedule, dcfg, make_rng(cfg.seed, STREAM_DISTILL),
                                     log_path=run.path(f"train_log_{distance}.jsonl"), student=copy.deepcopy(baseline))
        run.timings[f"train_ms[{distance}]"] = elapsed_ms(start)
        save_student(student, run.path(f"student_{distance}.safetensors"))
        x, _ = sample(student, scfg, labels=labels)
        ed, ed0 = energy_distance(x, reference), energy_distance(x0, reference)
        rows.append({
            "distance": distance,
            "energy_distance_1step": ed,
            "untrained_energy_distance_1step": ed0,
            "improvement": ed0 / ed if ed > 0 else float("inf"),
            "final_loss_ctm": log[-1]["loss_ctm"] if log else float("nan"),
        })
        logger.info("ablation[%s]: ED %.4g (untrained %.4g)", distance, ed, ed0)
    return [write_csv(run.path("ablation.csv"), ABLATION_COLUMNS, rows)]


__all__ = [
    "Run",
    "start_run",
    "write_csv",
    "build_mixture",
    "build_teacher",
    "run_train_teacher",
    "run_distill",
    "run_sample",
    "run_eval",
    "run_guide",
    "run_ablate_distance",
]
