import numpy as np

from src import plots


def test_figures_are_byte_identical_across_reruns(tmp_path):
    rows = [{"iter": i, "loss_ctm": 1.0 / (i + 1), "loss_dsm": 2.0 / (i + 1)} for i in range(20)]
    a = plots.loss_curves(tmp_path / "a.svg", rows)
    b = plots.loss_curves(tmp_path / "b.svg", rows)
    assert a.read_bytes() == b.read_bytes()


def test_intensity_overlay_and_scatter(tmp_path):
    target = np.linspace(-12.0, 0.0, 10)
    achieved = {"loss-guidance": np.tile(target, (3, 1)) + 0.5, "none": np.zeros((3, 10))}
    path = plots.intensity_overlay(tmp_path / "guide.svg", target, achieved, "ramp-up")
    assert "<svg" in path.read_text()
    pts = np.random.default_rng(0).normal(size=(30, 2))
    labels = np.array([0, 1, -1] * 10)
    out = plots.scatter_samples(tmp_path / "nested" / "s.svg", pts, labels, reference=pts)
    assert out.is_file()
