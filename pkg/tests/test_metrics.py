import numpy as np
import pytest
import torch

from src.data.mixture import from_spec
from src.errors import ArgumentError, InputShapeError
from src.metrics import (balanced_labels, bayes_accuracy, condition_accuracy, energy_distance, energy_permutation_null,
                         preservation_sweep, tradeoff_report)
from src.netcore import NULL_LABEL
from src.sampler import SamplerConfig
from src.utils import DTYPE, make_rng


def test_energy_distance_of_a_set_with_itself_is_zero():
    a = torch.randn(50, 3, dtype=DTYPE)
    assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)


def test_energy_distance_of_point_masses():
    a = torch.zeros(10, 2, dtype=DTYPE)
    b = torch.tensor([[3.0, 4.0]], dtype=DTYPE).expand(7, 2)
    assert energy_distance(a, b) == pytest.approx(10.0, rel=1e-12)


def test_energy_distance_is_symmetric_and_nonnegative():
    gen = np.random.default_rng(0)
    for _ in range(10):
        a = torch.from_numpy(gen.normal(0, 1, (30, 2)))
        b = torch.from_numpy(gen.normal(0.3, 1.2, (40, 2)))
        ab, ba = energy_distance(a, b), energy_distance(b, a)
        assert ab >= 0.0
        assert ab == pytest.approx(ba, rel=1e-10, abs=1e-14)


def test_energy_distance_errors():
    with pytest.raises(InputShapeError):
        energy_distance(torch.zeros(4, 2, dtype=DTYPE), torch.zeros(4, 3, dtype=DTYPE))
    with pytest.raises(ArgumentError):
        energy_distance(torch.zeros(0, 2, dtype=DTYPE), torch.zeros(4, 2, dtype=DTYPE))


def test_same_distribution_sits_inside_the_permutation_null():
    gen = np.random.default_rng(1)
    shifted = torch.from_numpy(gen.normal(1.0, 1.0, (200, 2)))
    a = torch.from_numpy(gen.normal(0.0, 1.0, (200, 2)))
    b = torch.from_numpy(gen.normal(0.0, 1.0, (200, 2)))
    null = energy_permutation_null(a, b, permutations=200, rng=np.random.default_rng(2))
    assert energy_distance(a, b) <= np.percentile(null, 99)
    assert energy_distance(a, shifted) > np.percentile(null, 99)


def _separable():
    return from_spec([
        {"label": "left", "components": [{"weight": 1.0, "mean": [-5.0, 0.0], "var": [0.1, 0.1]}]},
        {"label": "right", "components": [{"weight": 1.0, "mean": [5.0, 0.0], "var": [0.1, 0.1]}]},
    ])


def test_condition_accuracy_on_separable_labels():
    mix = _separable()
    x, labels = mix.sample(500, make_rng(0))
    assert condition_accuracy(x, labels, mix) == 1.0
    assert condition_accuracy(x, 1 - labels, mix) == 0.0
    assert bayes_accuracy(mix, 500, make_rng(1)) == 1.0


def test_condition_accuracy_matches_bayes_accuracy(two_label):
    x, labels = two_label.sample(20_000, make_rng(4))
    acc = condition_accuracy(x, labels, two_label)
    assert acc == pytest.approx(bayes_accuracy(two_label, 20_000, make_rng(5)), abs=0.02)


def test_null_labels_are_not_scored():
    mix = _separable()
    x = torch.tensor([[-5.0, 0.0], [5.0, 0.0], [5.0, 0.0]], dtype=DTYPE)
    assert condition_accuracy(x, torch.tensor([0, NULL_LABEL, 1]), mix) == 1.0
    with pytest.raises(ArgumentError):
        condition_accuracy(x, torch.full((3,), NULL_LABEL), mix)


def test_balanced_labels():
    assert balanced_labels(7, 3).tolist() == [0, 1, 2, 0, 1, 2, 0]


def test_tradeoff_single_step_row(student, two_label):
    reference, _ = two_label.sample(64, make_rng(0))
    cfg = SamplerConfig(num_samples=16, seed=3)
    rows, walls = tradeoff_report(student, two_label, reference, [1], [(3.0, 1.0)], cfg)
    assert len(rows) == 1 and len(walls) == 1
    row = rows[0]
    assert set(row) == {"steps", "omega", "nu", "energy_distance", "condition_accuracy", "preservation_vs_1step"}
    assert row["preservation_vs_1step"] == 0.0
    assert 0.0 <= row["condition_accuracy"] <= 1.0


def test_tradeoff_grid_and_preservation_sweep(student, two_label):
    reference, _ = two_label.sample(32, make_rng(0))
    cfg = SamplerConfig(num_samples=8, seed=3)
    rows, _ = tradeoff_report(student, two_label, reference, [1, 2, 4], [(3.0, 1.0), (2.0, 0.5)], cfg)
    assert [(r["steps"], r["omega"]) for r in rows] == [(1, 3.0), (2, 3.0), (4, 3.0), (1, 2.0), (2, 2.0), (4, 2.0)]
    noise = torch.randn(8, 2, dtype=DTYPE) * 80.0
    sweep = preservation_sweep(student, cfg, noise, balanced_labels(8, 2), steps_a=1, steps_b=1, gammas=(0.0, 0.5))
    assert [r["gamma"] for r in sweep] == [0.0, 0.5]
    # a single step jumps straight to sigma_min whatever gamma is
    assert [r["preservation"] for r in sweep] == [0.0, 0.0]
