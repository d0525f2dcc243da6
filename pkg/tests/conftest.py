import pytest
import torch

from src.data.mixture import from_spec, single_gaussian
from src.diffusion import Schedule
from src.netcore import ConditionedNet
from src.teacher import AnalyticTeacher, NeuralTeacher
from src.ctm_distill import StudentModel
from src.utils import make_rng


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: training runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def schedule():
    return Schedule()


@pytest.fixture
def gauss():
    return single_gaussian([0.0], [1.0])


@pytest.fixture
def two_label():
    """2-D, two labels with two components each."""
    return from_spec([
        {"label": "a", "prob": 0.5, "components": [
            {"weight": 0.6, "mean": [-1.0, 0.5], "var": [0.05, 0.08]},
            {"weight": 0.4, "mean": [-0.6, -0.7], "var": [0.04, 0.04]},
        ]},
        {"label": "b", "prob": 0.5, "components": [
            {"weight": 0.5, "mean": [0.9, 0.8], "var": [0.06, 0.03]},
            {"weight": 0.5, "mean": [0.7, -0.9], "var": [0.05, 0.05]},
        ]},
    ])


@pytest.fixture
def analytic(two_label, schedule):
    return AnalyticTeacher(two_label, schedule.sigma_data)


@pytest.fixture
def neural(schedule):
    torch.manual_seed(0)
    net = ConditionedNet(2, (16, 16), 8, 2)
    return NeuralTeacher(net, schedule).requires_grad_(False)


@pytest.fixture
def student(schedule):
    torch.manual_seed(1)
    return StudentModel.build(2, 2, schedule, hidden=(16, 16), embed_dim=8)
