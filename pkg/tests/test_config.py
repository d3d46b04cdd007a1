"""Config parsing, validation, defaulting and serialization."""

import pytest

from ltof import config
from ltof.config import ConfigError, parse_toml_like, resolve_config


GOOD = """
# experiment setup
[problem]
id = "portfolio"
n_assets = 10          # inline comment
risk_weight = 1.5

[training]
epochs = 50
lr = 1e-3

[two_stage]
layers = [1, 2]

[model]
batchnorm = false
"""


def test_parse_supported_toml_subset():
    parsed = parse_toml_like(GOOD)
    assert parsed["problem"]["id"] == "portfolio"
    assert parsed["problem"]["n_assets"] == 10
    assert isinstance(parsed["problem"]["n_assets"], int)
    assert parsed["problem"]["risk_weight"] == 1.5
    assert parsed["training"]["lr"] == 1e-3
    assert parsed["two_stage"]["layers"] == [1, 2]
    assert parsed["model"]["batchnorm"] is False


@pytest.mark.parametrize("text, fragment", [
    ("x = 1", "outside any"),
    ("[problem\nid = 2", "unterminated section"),
    ("[problem]\nlayers = [1, 2", "unterminated array"),
    ("[problem]\nid = what?!", "cannot parse"),
    ("[problem]\njust a line", "expected key = value"),
    ("[problem]\nn_assets = 1\nn_assets = 2", "duplicate"),
    ("[]\nx = 1", "empty section"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_toml_like(text)


def test_resolve_fills_defaults_per_kind():
    eff = resolve_config({"problem": {"id": "portfolio"}})
    assert eff["problem"]["n_samples"] == 3000
    assert eff["features"]["width"] == 30
    assert eff["epo"]["proxy_method"] == "ld"
    eff2 = resolve_config({"problem": {"id": "toy2d"}})
    assert eff2["problem"]["n_samples"] == 1000
    assert eff2["features"]["width"] == 2
    assert eff2["epo"]["proxy_method"] == "pdl"
    assert eff2["problem"]["zeta_low"] == 1.0


def test_resolve_rejects_unknown_and_mistyped():
    with pytest.raises(ConfigError, match="unknown section"):
        resolve_config({"solvers": {}})
    with pytest.raises(ConfigError, match="unknown key"):
        resolve_config({"problem": {"id": "portfolio", "color": "red"}})
    with pytest.raises(ConfigError, match="expected integer"):
        resolve_config({"problem": {"id": "portfolio", "n_samples": 2.5}})
    with pytest.raises(ConfigError, match="expected boolean"):
        resolve_config({"model": {"batchnorm": 1}})
    with pytest.raises(ConfigError, match="problem.id"):
        resolve_config({"problem": {"id": "tsp"}})


def test_booleans_are_not_integers():
    with pytest.raises(ConfigError):
        resolve_config({"problem": {"id": "portfolio", "n_samples": True}})


def test_paper_scale_overrides():
    eff = resolve_config({"problem": {"id": "portfolio"}}, paper_scale=True)
    assert eff["problem"]["n_assets"] == 50
    assert eff["problem"]["n_samples"] == 12000
    assert eff["model"]["hidden_width"] == 500
    assert eff["training"]["lr"] == 1e-4


def test_derived_defaults():
    eff = resolve_config({"problem": {"id": "portfolio", "data_seed": 7},
                          "training": {"epochs": 123}})
    assert eff["epo"]["proxy_epochs"] == 123
    assert eff["features"]["seed"] == 7
    eff2 = resolve_config({"epo": {"proxy_epochs": 11}, "features": {"seed": 3}})
    assert eff2["epo"]["proxy_epochs"] == 11
    assert eff2["features"]["seed"] == 3


def test_render_parse_round_trip():
    eff = resolve_config(parse_toml_like(GOOD))
    text = config.render_config(eff)
    again = resolve_config(parse_toml_like(text))
    assert again == eff


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config.load_config(str(tmp_path / "nope.toml"))


def test_save_and_load_effective(tmp_path):
    eff = resolve_config({"problem": {"id": "nonconvex"}})
    path = str(tmp_path / "eff.toml")
    config.save_effective_config(eff, path)
    assert config.load_config(path) == eff


def test_harness_config_mapping():
    eff = resolve_config({"problem": {"id": "nonconvex", "n_var": 8,
                                      "deploy_restarts": 2}})
    cfg = config.harness_config(eff)
    assert cfg["kind"] == "nonconvex"
    assert cfg["n_var"] == 8
    assert cfg["deploy_restarts"] == 2
    assert cfg["oracle_restarts"] == 24
    assert cfg["two_stage_layers"] == eff["two_stage"]["layers"]
    eff_p = resolve_config({"problem": {"id": "portfolio"}})
    cfg_p = config.harness_config(eff_p)
    assert "risk_weight" in cfg_p and "deploy_restarts" not in cfg_p
    eff_t = resolve_config({"problem": {"id": "toy2d"}})
    cfg_t = config.harness_config(eff_t)
    assert "shifts" in cfg_t and "shift_direction" in cfg_t
