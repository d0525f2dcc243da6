import csv
import json
from pathlib import Path

import pytest
import yaml

from src.cli import main

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


def _config(tmp_path: Path, **changes) -> Path:
    raw = yaml.safe_load(SMOKE.read_text())
    raw["output_dir"] = str(tmp_path / "results")
    for section, values in changes.items():
        raw.setdefault(section, {}).update(values)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def _run(capsys, *argv) -> Path:
    code = main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    assert code == 0, argv
    return Path(out[-1])


@pytest.fixture
def trained(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SEED", raising=False)
    cfg = _config(tmp_path)
    teacher_dir = _run(capsys, "train-teacher", "--config", str(cfg))
    teacher = teacher_dir / "teacher.safetensors"
    distill_dir = _run(capsys, "distill", "--config", str(cfg), "--teacher", str(teacher))
    return cfg, teacher, distill_dir / "student.safetensors", teacher_dir, distill_dir


def test_train_and_distill_write_their_outputs(trained):
    _, teacher, student, teacher_dir, distill_dir = trained
    assert teacher.is_file() and student.is_file()
    report = json.loads((teacher_dir / "teacher_report.json").read_text())
    assert report["denoiser_mse"] >= 0.0
    rows = [json.loads(line) for line in (distill_dir / "train_log.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in rows] == list(range(5))
    manifest = json.loads((distill_dir / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["subcommand"] == "distill"
    assert manifest["flags"]["teacher"] == str(teacher)
    assert "train_ms" in json.loads((distill_dir / "timings.json").read_text())


def test_sampling_is_reproducible(trained, capsys):
    cfg, _, student, _, _ = trained
    first = _run(capsys, "sample", "--config", str(cfg), "--student", str(student))
    second = _run(capsys, "sample", "--config", str(cfg), "--student", str(student))
    assert first != second
    assert (first / "samples.csv").read_bytes() == (second / "samples.csv").read_bytes()
    replay = _run(capsys, "sample", "--manifest", str(first / "manifest.json"))
    assert (replay / "samples.csv").read_bytes() == (first / "samples.csv").read_bytes()
    with open(first / "samples.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 8
    assert list(rows[0]) == ["seed", "chain", "label", "omega", "nu", "gamma", "steps", "x0", "x1"]


def test_eval_guide_and_ablation(trained, capsys):
    cfg, teacher, student, _, _ = trained
    eval_dir = _run(capsys, "eval", "--config", str(cfg), "--student", str(student), "--teacher", str(teacher))
    with open(eval_dir / "tradeoff.csv", newline="") as f:
        assert [r["steps"] for r in csv.DictReader(f)] == ["1", "2"]
    summary = json.loads((eval_dir / "eval_summary.json").read_text())
    assert summary["student_energy_distance_1step"] >= 0.0
    assert (eval_dir / "preservation.csv").is_file()

    guide_dir = _run(capsys, "guide", "--config", str(cfg), "--student", str(student), "--target-shape", "ramp-up")
    with open(guide_dir / "guide_summary.csv", newline="") as f:
        summary_rows = list(csv.DictReader(f))
    assert [r["method"] for r in summary_rows] == ["loss-guidance", "zt-opt", "none"]
    assert {r["shape"] for r in summary_rows} == {"ramp-up"}

    ablation_dir = _run(capsys, "ablate-distance", "--config", str(cfg), "--teacher", str(teacher))
    with open(ablation_dir / "ablation.csv", newline="") as f:
        assert [r["distance"] for r in csv.DictReader(f)] == ["l2_zero_time", "l2_s_time", "teacher_feature"]


def test_ablation_modes_share_one_initialisation(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SEED", raising=False)
    cfg = _config(tmp_path, student={"hidden": [32, 32]})
    teacher = _run(capsys, "train-teacher", "--config", str(cfg)) / "teacher.safetensors"
    ablation_dir = _run(capsys, "ablate-distance", "--config", str(cfg), "--teacher", str(teacher))
    with open(ablation_dir / "ablation.csv", newline="") as f:
        untrained = [r["untrained_energy_distance_1step"] for r in csv.DictReader(f)]
    assert len(untrained) == 3
    assert len(set(untrained)) == 1


def test_plots_are_written(trained, capsys):
    cfg, _, student, _, _ = trained
    run_dir = _run(capsys, "sample", "--config", str(cfg), "--student", str(student), "--plot")
    assert (run_dir / "samples.svg").read_text().lstrip().startswith("<?xml")


def test_invalid_config_exits_with_one(tmp_path, monkeypatch):
    monkeypatch.delenv("SEED", raising=False)
    cfg = _config(tmp_path, distill={"omega_min": 6.0, "omega_max": 5.0})
    assert main(["distill", "--config", str(cfg)]) == 1
    assert main(["sample", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_missing_teacher_flag_is_a_config_error(tmp_path, monkeypatch):
    monkeypatch.delenv("SEED", raising=False)
    assert main(["distill", "--config", str(_config(tmp_path))]) == 1


def test_missing_student_exits_with_two(tmp_path, monkeypatch):
    monkeypatch.delenv("SEED", raising=False)
    assert main(["sample", "--config", str(_config(tmp_path))]) == 2
    assert main(["sample", "--config", str(_config(tmp_path)), "--student", str(tmp_path / "none.safetensors")]) == 2


def test_analytic_teacher_distills_without_checkpoint(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SEED", raising=False)
    cfg = _config(tmp_path, teacher={"kind": "analytic"}, distill={"distance": "l2_s_time", "iterations": 2})
    run_dir = _run(capsys, "distill", "--config", str(cfg))
    assert (run_dir / "student.safetensors").is_file()
