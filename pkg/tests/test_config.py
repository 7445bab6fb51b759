import pytest

from msenet.config import DATA_ROOT_ENV, RunConfig, apply_overrides, desk_config, from_dict, load_config, save_config
from msenet.errors import ConfigError


def test_yaml_round_trip(tmp_path):
    config = desk_config("/some/where").replace(**{"model.gamma_init": 0.3, "seed": 7})
    save_config(config, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == config and back.hash() == config.hash()


def test_scientific_notation_strings_coerce(tmp_path):
    (tmp_path / "c.yaml").write_text("optim:\n  lr: 1e-4\ntotal_episodes: 20\n")
    config = load_config(tmp_path / "c.yaml")
    assert config.optim.lr == pytest.approx(1e-4) and isinstance(config.optim.lr, float)


def test_unknown_key_is_listed(tmp_path):
    (tmp_path / "c.yaml").write_text("model:\n  widht: 3\n")
    with pytest.raises(ConfigError, match="model.widht"):
        load_config(tmp_path / "c.yaml")
    with pytest.raises(ConfigError, match="optim.momentum"):
        apply_overrides(RunConfig(), ["optim.momentum=0.9"])


@pytest.mark.parametrize("override", ["total_episodes=abc", "model.multiscale=3", "optim.lr=-1",
                                      "model.backbone=vgg", "model.w_init=[1,2]", "eval_task.n_way=0",
                                      "total_episodes=0", "noequals"])
def test_bad_values_rejected(override):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), [override])


def test_overrides_parse_yaml_values():
    c = apply_overrides(RunConfig(), ["model.w_init=[1, 1, 1, 1, 1]", "model.self_attention=false",
                                      "data.root=/x", "train_task.n_way=20"])
    assert c.model.w_init == [1.0] * 5 and c.model.self_attention is False
    assert c.data.root == "/x" and c.train_task.n_way == 20


def test_env_var_default_root(monkeypatch):
    monkeypatch.setenv(DATA_ROOT_ENV, "/from/env")
    assert str(RunConfig().data.resolved_root()) == "/from/env"
    assert str(desk_config("/explicit").data.resolved_root()) == "/explicit"
    monkeypatch.delenv(DATA_ROOT_ENV)
    with pytest.raises(ConfigError, match=DATA_ROOT_ENV):
        RunConfig().data.resolved_root()


def test_defaults_match_documented_values():
    c = RunConfig()
    assert c.optim.lr == 1e-4 and (c.optim.beta1, c.optim.beta2, c.optim.eps) == (0.9, 0.999, 1e-8)
    assert (c.train_task.n_way, c.train_task.k_shot, c.train_task.n_query) == (30, 5, 15)
    assert (c.total_episodes, c.eval_interval, c.val_episodes, c.test_episodes) == (10_000, 250, 200, 600)
    assert c.model.gamma_init == 0.2 and c.model.reduction == 8 and c.model.distance == "euclidean"
    assert from_dict({}) == c
