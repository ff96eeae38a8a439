import pytest

from gtvseg.config import RunConfig, config_from_dict, dump_config, load_config, parse_indices
from gtvseg.errors import ConfigError


def test_defaults_are_desk_scale():
    cfg = RunConfig()
    assert cfg.network.base_channels == (8, 16, 32, 64)
    assert cfg.train.batch_size == 4 and cfg.train.total_iterations == 2000
    assert cfg.train.lr0 == 1e-4 and cfg.train.weight_decay == 1e-5


def test_dotted_keys(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(
        'network.base_channels = [4, 8, 16]\n'
        'train.lr0 = 0.001\n'
        'train.total_iterations = 10\n'
        'paths.data = "cases"\n'
        'paths.cases = "0-2,5"\n'
    )
    cfg = load_config(p)
    assert cfg.network.base_channels == (4, 8, 16) and cfg.network.levels == 3
    assert cfg.train.lr0 == 0.001 and cfg.train.total_iterations == 10
    assert cfg.data_dir == tmp_path / "cases"
    assert cfg.cases == [0, 1, 2, 5]


def test_tables_work_like_dotted_keys():
    cfg = config_from_dict({"train": {"batch_size": 2}})
    assert cfg.train.batch_size == 2


@pytest.mark.parametrize("tree", [
    {"train": {"learning_rate": 1}},
    {"netwrok": {"base_channels": [8]}},
    {"paths": {"output": "x"}},
    {"seed": 3},
])
def test_unknown_keys_rejected(tree):
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_dict(tree)


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"scale": "coastal"}})
    with pytest.raises(ConfigError):
        config_from_dict({"network": {"base_channels": [3, 5]}})


def test_bad_toml(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("train.lr0 = = 1\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_dump_round_trips(tmp_path):
    cfg = config_from_dict({"train": {"lr0": 0.002, "scale": "middle"}, "paths": {"cases": [1, 3]}})
    p = tmp_path / "out.toml"
    p.write_text(dump_config(cfg))
    back = load_config(p)
    assert back.network == cfg.network and back.train == cfg.train and back.cases == [1, 3]


def test_parse_indices():
    assert parse_indices("20-24") == [20, 21, 22, 23, 24]
    assert parse_indices([3, 1]) == [1, 3]
    for bad in ["5-2", "x", "-1"]:
        with pytest.raises(ConfigError):
            parse_indices(bad)
