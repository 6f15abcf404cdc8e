from pathlib import Path

import pytest
import yaml

from cmaml_mppi.config import ExperimentConfig, apply_overrides, load_config, to_dict

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_shipped_yaml_equals_code_defaults():
    cfg = load_config([CONFIGS / "method_defaults.yaml", CONFIGS / "plumbing_defaults.yaml"])
    assert cfg == ExperimentConfig()


def test_method_values_in_defaults():
    cfg = ExperimentConfig()
    a = cfg.adapt
    assert (a.update_period, a.n_c, a.eta, a.meta_lr, a.meta_period) == (0.08, 14, 0.1, 1e-4, 0.4)
    m = cfg.mppi
    assert (m.track_weight, m.speed_weight, m.v_ref, m.horizon, m.dt) == (600.0, 25.0, 3.2, 100, 0.02)
    assert cfg.experiment.laps == 18 and cfg.experiment.inference_duration == 60.0


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="mppi.sample"):
        apply_overrides(ExperimentConfig(), {"mppi": {"sample": 3}})
    with pytest.raises(ValueError, match="expected a mapping"):
        apply_overrides(ExperimentConfig(), {"mppi": 3})


def test_overrides_coerce_and_validate(tmp_path):
    p = tmp_path / "o.yaml"
    p.write_text(yaml.safe_dump({"mppi": {"temperature": 10, "noise_std": [0.1, 0.3]},
                                 "experiment": {"seeds": [7]}}))
    cfg = load_config([p])
    assert cfg.mppi.temperature == 10.0 and isinstance(cfg.mppi.temperature, float)
    assert cfg.mppi.noise_std == (0.1, 0.3)
    assert cfg.experiment.seeds == (7,)
    with pytest.raises(ValueError):
        load_config([], {"adapt": {"mode": "nope"}})
    with pytest.raises(ValueError):
        load_config([], {"experiment": {"first_scored_lap": 19}})


def test_later_files_win(tmp_path):
    a, b = tmp_path / "a.yaml", tmp_path / "b.yaml"
    a.write_text("adapt: {eta: 0.2}\n")
    b.write_text("adapt: {eta: 0.3}\n")
    assert load_config([a, b]).adapt.eta == 0.3


def test_to_dict_roundtrip():
    cfg = ExperimentConfig()
    d = yaml.safe_load(yaml.safe_dump(to_dict(cfg)))
    assert apply_overrides(ExperimentConfig(), d) == cfg


def test_two_mat_surfaces():
    from cmaml_mppi.sim import surface_params
    smap = ExperimentConfig().surfaces.two_mat()
    assert smap.surface_ids() == ["cement", "rubber", "foam"]
    assert surface_params(smap, 2.0, 1.0) == ("rubber", 1.2, 2.0)
    assert surface_params(smap, -2.0, 1.0) == ("foam", 0.6, 1.0)
    assert surface_params(smap, 0.0, 5.0) == ("cement", 0.9, 1.0)
