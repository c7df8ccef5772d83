import os

import pytest

from leverage_cycle_sim.common.exceptions import ConfigError
from leverage_cycle_sim.common.run_config import (
    CONFIG_KEYS,
    RunConfig,
    RunConfigManager,
    load_config,
    parse_config,
    serialize_config,
)
from leverage_cycle_sim.model.params import ModelParams

PRESET_DIR = os.path.join(os.path.dirname(__file__), "..", "..", "config", "presets")


def test_empty_document_gives_table_defaults():
    config = parse_config("# nothing but a comment\n\n")
    assert config == RunConfig()
    assert config.model_params() == ModelParams()
    assert (config.a0, config.a1, config.b1) == (1e-3, 0.016, 0.87)


def test_values_and_comments():
    config = parse_config("alpha = 0.1  # riskier\nseed=7\ntheta_minus = 4.75\n")
    assert config.alpha == 0.1
    assert config.seed == 7
    assert config.model_params().theta_down == 4.75


def test_none_token_for_optional_rate():
    assert parse_config("theta_minus = none").theta_minus is None


def test_invalid_value_cites_its_line():
    with pytest.raises(ConfigError, match="alpha") as excinfo:
        parse_config("tau = 0.1\n\nalpha = -1\n")
    assert excinfo.value.line == 3
    assert str(excinfo.value).startswith("line 3:")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'gamma'") as excinfo:
        parse_config("alpha = 0.1\ngamma = 2\n")
    assert excinfo.value.line == 2
    assert excinfo.value.exit_code == 4


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate key 'b'"):
        parse_config("b = -0.5\nb = 0.0\n")


@pytest.mark.parametrize("document, message", [
    ("seed = 1.5", "integer"),
    ("mu = lots", "real number"),
    ("mu = inf", "finite"),
    ("mu =", "missing value"),
    ("mu 25", "key = value"),
])
def test_malformed_lines(document, message):
    with pytest.raises(ConfigError, match=message) as excinfo:
        parse_config(document)
    assert excinfo.value.line == 1


def test_run_settings_validated():
    with pytest.raises(ConfigError, match="q must lie"):
        parse_config("q = 1.5")
    with pytest.raises(ConfigError, match="tau\\*delta"):
        parse_config("delta = 20")


def test_serialized_document_parses_back_to_same_config():
    config = parse_config("alpha = 0.123456789012345\ne_bar = 1e-5\ntheta_minus = none\nn_steps = 300\n")
    text = serialize_config(config)
    assert parse_config(text) == config
    assert "theta_minus = none" in text
    assert "n_steps = 300\n" in text
    assert len(text.splitlines()) == len(CONFIG_KEYS)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(str(tmp_path / "absent.cfg"))
    assert load_config(None) == RunConfig()


@pytest.mark.parametrize("preset", ["scenario_i", "scenario_ii", "scenario_iii", "scenario_iv",
                                    "policy_micro", "policy_mixed", "policy_macro"])
def test_presets_load(preset):
    config = load_config(os.path.join(PRESET_DIR, f"{preset}.cfg"))
    assert config.model_params().policy.b == -0.5


def test_deterministic_presets():
    assert load_config(os.path.join(PRESET_DIR, "scenario_i.cfg")).is_deterministic
    assert not load_config(os.path.join(PRESET_DIR, "scenario_iii.cfg")).is_deterministic


def test_manager_overrides_and_names():
    manager = RunConfigManager(RunConfig(), {"env_name": "test", "max_threads": 3})
    assert manager.runtime.max_threads == 3
    assert manager.generate_output_name("simulate") == "test-simulate.csv"
    assert manager.with_overrides(seed=None) is manager
    changed = manager.with_overrides(b=0.25, seed=9)
    assert changed.model_params().policy.b == 0.25
    assert changed.config.seed == 9
    assert changed.runtime.env_name == "test"
    with pytest.raises(ConfigError, match="unknown override"):
        manager.with_overrides(colour="blue")


def test_manager_drops_deterministic_shocks():
    manager = RunConfigManager(parse_config("a0 = 0\na1 = 0\nb1 = 0\n"))
    assert manager.garch_params() is None
    assert RunConfigManager(RunConfig()).garch_params() is not None
