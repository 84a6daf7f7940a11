import pytest

from idcf.config import config_from_dict, load_config
from idcf.errors import ConfigError

from .conftest import CONFIGS


def test_defaults_follow_appendix_values():
    cfg = config_from_dict({"data": {"path": "x"}})
    assert (cfg.adapt.heads, cfg.adapt.sample_size, cfg.adapt.contrastive_weight) == (4, 200, 10.0)
    assert (cfg.model.dim, cfg.model.hidden) == (16, 32)


def test_unknown_key_names_the_key():
    with pytest.raises(ConfigError, match="model.dimm"):
        config_from_dict({"data": {"path": "x"}, "model": {"dimm": 3}})


def test_unknown_section():
    with pytest.raises(ConfigError, match="modle"):
        config_from_dict({"data": {"path": "x"}, "modle": {}})


def test_missing_required_key():
    with pytest.raises(ConfigError, match="data.path"):
        config_from_dict({})


def test_choices_and_types():
    with pytest.raises(ConfigError, match="model.backbone"):
        config_from_dict({"data": {"path": "x"}, "model": {"backbone": "mlp"}})
    with pytest.raises(ConfigError, match="model.dim"):
        config_from_dict({"data": {"path": "x"}, "model": {"dim": "16"}})
    with pytest.raises(ConfigError, match="adapt.heads"):
        config_from_dict({"data": {"path": "x"}, "adapt": {"heads": 0}})


def test_pretrain_hash_ignores_adapt_section():
    a = config_from_dict({"data": {"path": "x"}})
    b = config_from_dict({"data": {"path": "x"}, "adapt": {"learning_rate": 0.5}})
    c = config_from_dict({"data": {"path": "x"}, "pretrain": {"learning_rate": 0.5}})
    assert a.pretrain_hash() == b.pretrain_hash() != c.pretrain_hash()


def test_shipped_configs_load():
    for p in sorted(CONFIGS.glob("*.toml")):
        cfg = load_config(p)
        assert cfg.data.path


def test_bad_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[data\n")
    with pytest.raises(ConfigError):
        load_config(p)
