import json
from pathlib import Path

import pytest
import yaml

from src.config import RunConfig, load_config, parse_config
from src.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", ["reference.yaml", "signal.yaml", "smoke.yaml"])
def test_shipped_configs_parse(name, monkeypatch):
    monkeypatch.delenv("SEED", raising=False)
    cfg = load_config(CONFIGS / name)
    assert isinstance(cfg, RunConfig)
    cfg.distill_config()
    cfg.sampler_config()


def test_reference_values(monkeypatch):
    monkeypatch.delenv("SEED", raising=False)
    cfg = load_config(CONFIGS / "reference.yaml")
    assert cfg.data.num_labels == 4 and cfg.data.components == 3
    assert cfg.teacher.hidden == (64, 64)
    dc = cfg.distill_config()
    assert dc.hidden == (128, 128) and dc.grid_size == 40 and dc.distance == "teacher_feature"
    assert cfg.eval.settings == ((3.0, 1.0), (2.0, 1.0))
    assert cfg.schedule.sigma_max == 80.0


def test_unknown_keys_name_the_field():
    with pytest.raises(ConfigError) as exc:
        parse_config({"distill": {"learning_rate": 1e-3}})
    assert exc.value.field == "distill.learning_rate"
    with pytest.raises(ConfigError) as exc:
        parse_config({"optimizer": {}})
    assert exc.value.field == "optimizer"


def test_invalid_values_name_the_field():
    with pytest.raises(ConfigError) as exc:
        parse_config({"distill": {"omega_min": 6.0, "omega_max": 5.0}})
    assert exc.value.field == "distill.omega_min"
    with pytest.raises(ConfigError) as exc:
        parse_config({"teacher": {"kind": "oracle"}})
    assert exc.value.field == "teacher.kind"
    with pytest.raises(ConfigError) as exc:
        parse_config({"distill": {"grid_size": 2.5}})
    assert exc.value.field == "distill.grid_size"
    with pytest.raises(ConfigError) as exc:
        parse_config({"guidance": {"window": 4}})
    assert exc.value.field == "guidance.window"
    with pytest.raises(ConfigError) as exc:
        parse_config({"sampler": {"gamma": 2.0}}).sampler_config()
    assert exc.value.field == "sampler"


def test_guidance_window_defaults_from_dim():
    cfg = parse_config({"data": {"dim": 64, "kind": "signal"}})
    gcfg, window = cfg.guidance_config(64)
    assert window == 9
    assert gcfg.sampler.num_samples == cfg.guidance.chains and gcfg.sampler.steps == 16
    with pytest.raises(ConfigError):
        parse_config({"guidance": {"window": 5}}).guidance_config(3)


def test_guidance_allows_zero_noise_optimisation_steps():
    gcfg, _ = parse_config({"guidance": {"iterations": 0}}).guidance_config(64)
    assert gcfg.iterations == 0
    with pytest.raises(ConfigError) as exc:
        parse_config({"guidance": {"iterations": -1}})
    assert exc.value.field == "guidance.iterations"
    with pytest.raises(ConfigError) as exc:
        parse_config({"guidance": {"zt_lr": 0.0}})
    assert exc.value.field == "guidance.zt_lr"


def test_seed_override_from_environment(tmp_path, monkeypatch):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"seed": 3}))
    monkeypatch.setenv("SEED", "11")
    assert load_config(path).seed == 11
    monkeypatch.setenv("SEED", "eleven")
    with pytest.raises(ConfigError):
        load_config(path)
    monkeypatch.delenv("SEED")
    cfg = load_config(path)
    assert cfg.seed == 3 and cfg.sampler_config().seed == 3


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("data: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_dict_round_trip(monkeypatch):
    monkeypatch.delenv("SEED", raising=False)
    cfg = load_config(CONFIGS / "signal.yaml")
    assert parse_config(cfg.to_dict()) == cfg
    assert parse_config(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_explicit_mixture_requires_components():
    with pytest.raises(ConfigError) as exc:
        parse_config({"data": {"kind": "explicit"}})
    assert exc.value.field == "data.mixture"
