import copy
from dataclasses import replace

import pytest
import torch

from src.ctm_distill import DistillConfig, StudentModel, train_student
from src.data.mixture import blob_mixture, smooth_signal_mixture
from src.diffusion import Schedule, karras_grid
from src.guidance import METHODS, TARGET_SHAPES, GuidanceConfig, GuidanceTarget, default_window, run_method
from src.metrics import balanced_labels, condition_accuracy, energy_distance, tradeoff_report
from src.sampler import SamplerConfig, preservation_distance, sample
from src.solver import generate
from src.teacher import AnalyticTeacher
from src.utils import DTYPE, make_rng


def test_pipeline_with_analytic_teacher(two_label, schedule):
    teacher = AnalyticTeacher(two_label, schedule.sigma_data)
    cfg = DistillConfig(grid_size=8, max_ode_steps=7, distance="l2_zero_time", batch_size=16, iterations=4,
                        hidden=(16, 16), embed_dim=8, lr=1e-3)
    torch.manual_seed(0)
    student, rows = train_student(teacher, two_label, schedule, cfg, make_rng(0))
    assert len(rows) == 4
    assert all(r["loss_ctm"] >= 0 and r["loss_dsm"] >= 0 for r in rows)
    reference, _ = two_label.sample(64, make_rng(1), labels=balanced_labels(64, 2))
    table, _ = tradeoff_report(student, two_label, reference, [1, 3], [(3.0, 1.0)],
                               SamplerConfig(num_samples=16, seed=2))
    assert len(table) == 2
    assert all(torch.isfinite(torch.tensor(r["energy_distance"])) for r in table)


def test_every_guidance_method_runs(schedule):
    torch.manual_seed(0)
    student = StudentModel.build(10, 2, schedule, hidden=(16,), embed_dim=8)
    target = GuidanceTarget.from_shape("triangle", 10, 3)
    cfg = GuidanceConfig(sampler=SamplerConfig(steps=2, num_samples=3, seed=1), iterations=2)
    for method in ("loss-guidance", "zt-opt", "none"):
        result = run_method(method, student, target, cfg)
        assert result.sample.shape == (3, 10)
        assert bool(torch.isfinite(target.loss(result.sample)).all())


@pytest.mark.slow
def test_distilled_student_follows_the_condition():
    schedule = Schedule()
    mix = blob_mixture(2, 4, 3, make_rng(0)).standardized(schedule.sigma_data)
    teacher = AnalyticTeacher(mix, schedule.sigma_data)
    cfg = DistillConfig(iterations=3000, lr=4e-4, hidden=(128, 128), distance="l2_zero_time")
    torch.manual_seed(0)
    start = StudentModel.build(2, 4, schedule, cfg.hidden, cfg.embed_dim)
    student, _ = train_student(teacher, mix, schedule, cfg, make_rng(1), student=copy.deepcopy(start))
    labels = balanced_labels(1000, 4)
    noise = torch.from_numpy(make_rng(2).standard_normal((1000, 2))) * schedule.sigma_max
    x, _ = sample(student, SamplerConfig(steps=1, omega=3.0, seed=3), initial_noise=noise, labels=labels)
    x_teacher = generate(teacher, noise, labels, 3.0, karras_grid(schedule, 19))
    x_start, _ = sample(start, SamplerConfig(steps=1, omega=3.0, seed=3), initial_noise=noise, labels=labels)
    assert condition_accuracy(x, labels, mix) >= 0.8
    assert energy_distance(x, x_teacher) < energy_distance(x_start, x_teacher)
    assert x.dtype == DTYPE


@pytest.fixture(scope="module")
def reference_student():
    schedule = Schedule()
    mix = blob_mixture(2, 4, 3, make_rng(0)).standardized(schedule.sigma_data)
    teacher = AnalyticTeacher(mix, schedule.sigma_data)
    cfg = DistillConfig(iterations=10000, lr=4e-4, hidden=(128, 128), distance="l2_zero_time")
    torch.manual_seed(0)
    student, _ = train_student(teacher, mix, schedule, cfg, make_rng(1))
    return student, teacher, mix, schedule


@pytest.mark.slow
def test_more_steps_do_not_hurt_and_one_step_tracks_the_teacher(reference_student):
    student, teacher, mix, schedule = reference_student
    labels = balanced_labels(1000, 4)
    held_out, _ = mix.sample(1000, make_rng(4), labels=labels)
    noise = torch.from_numpy(make_rng(2).standard_normal((1000, 2))) * schedule.sigma_max
    cfg = SamplerConfig(steps=1, gamma=0.0, omega=3.0, seed=3)
    one, _ = sample(student, cfg, initial_noise=noise, labels=labels)
    many, _ = sample(student, replace(cfg, steps=16), initial_noise=noise, labels=labels)
    x_teacher = generate(teacher, noise, labels, 3.0, karras_grid(schedule, 19))
    ed_one = energy_distance(one, held_out)
    assert energy_distance(many, held_out) <= ed_one
    assert ed_one <= 2.0 * energy_distance(x_teacher, held_out)


@pytest.mark.slow
def test_deterministic_chains_preserve_the_one_step_sample(reference_student):
    student, _, _, schedule = reference_student
    labels = balanced_labels(256, 4)
    noise = torch.from_numpy(make_rng(5).standard_normal((256, 2))) * schedule.sigma_max
    cfg = SamplerConfig(omega=3.0, seed=6)
    fresh = preservation_distance(student, cfg, 1, 16, 1.0, noise, labels=labels)
    kept = preservation_distance(student, cfg, 1, 16, 0.0, noise, labels=labels)
    assert fresh >= 1.5 * kept


@pytest.mark.slow
def test_loss_guidance_controls_the_intensity_envelope():
    schedule = Schedule()
    mix = smooth_signal_mixture(64, 2, 3, make_rng(0)).standardized(schedule.sigma_data)
    teacher = AnalyticTeacher(mix, schedule.sigma_data)
    dcfg = DistillConfig(iterations=3000, lr=2e-4, hidden=(256, 256), embed_dim=64, distance="l2_zero_time")
    torch.manual_seed(0)
    student, _ = train_student(teacher, mix, schedule, dcfg, make_rng(1))
    labels = torch.zeros(50, dtype=torch.long)
    reference, _ = mix.sample(50, make_rng(2), labels=labels)
    gcfg = GuidanceConfig(sampler=SamplerConfig(steps=16, omega=3.0, label=0, seed=3, num_samples=50))
    mse = {m: [] for m in METHODS}
    ed = {m: [] for m in METHODS}
    for shape in TARGET_SHAPES:
        target = GuidanceTarget.from_shape(shape, 64, default_window(64))
        for method in METHODS:
            x = run_method(method, student, target, gcfg, labels=labels).sample
            mse[method].append(float(target.loss(x).mean()))
            ed[method].append(energy_distance(x, reference))
    mean = {m: sum(v) / len(v) for m, v in mse.items()}
    assert mean["loss-guidance"] <= mean["none"] / 3.0
    assert mean["zt-opt"] < mean["none"]
    assert sum(ed["loss-guidance"]) <= 2.0 * sum(ed["none"])
