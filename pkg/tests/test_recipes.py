import json

import pytest

from trexlab.config import (ConfigError, RunConfig, list_recipes, load_config, load_recipe, parse_config,
                            recipe_dir, resolve)


@pytest.mark.parametrize("name", list_recipes())
def test_recipe_parses_strictly(name):
    cfg = load_recipe(name)
    assert cfg.io.run_name == name
    raw = json.loads((recipe_dir() / f"{name}.json").read_text())
    assert parse_config(raw) == cfg


def test_defaults_are_the_published_hyperparameters():
    cfg = RunConfig()
    opt = cfg.optimizer
    assert (opt.base_lr, opt.batch_size, opt.epochs, opt.warmup_epochs) == (0.1, 256, 100, 10)
    assert (opt.momentum, opt.weight_decay) == (0.9, 1e-4)
    assert opt.peak_lr == 0.1
    obj = cfg.objective
    assert (obj.kind, obj.temperature, obj.ema_momentum, obj.memory_per_class) == ("ocm", 0.1, 0.999, 8)
    aug = cfg.augment
    assert (aug.n_global, aug.n_local, aug.global_scale, aug.local_scale) == (1, 8, (0.4, 1.0), (0.05, 0.4))
    proj = cfg.model.projector
    assert (proj.n_layers, proj.hidden_dim, proj.bottleneck_dim, proj.input_l2) == (1, 2048, 256, True)
    assert resolve(cfg, 1000).objective.memory_size == 8000


def test_trex_differs_from_trex_star_only_in_depth_and_scales():
    a = load_recipe("trex_star").to_dict()
    b = load_recipe("trex").to_dict()
    diffs = []

    def walk(x, y, path):
        if isinstance(x, dict):
            for k in x:
                walk(x[k], y[k], path + [k])
        elif x != y:
            diffs.append(".".join(path))

    walk(a, b, [])
    assert sorted(diffs) == ["augment.global_scale", "augment.local_scale", "io.run_name",
                             "model.projector.n_layers"]
    assert b["model"]["projector"]["n_layers"] == 3
    assert b["augment"]["global_scale"] == [0.25, 1.0] and b["augment"]["local_scale"] == [0.05, 0.25]


def test_unknown_key_reports_path():
    with pytest.raises(ConfigError, match=r"model\.projector\.hidden"):
        parse_config({"model": {"projector": {"hidden": 3}}})
    with pytest.raises(ConfigError, match=r"optimizer\.batch_size"):
        parse_config({"optimizer": {"batch_size": "big"}})


def test_memory_objective_constraints():
    with pytest.raises(ConfigError):
        parse_config({"objective": {"kind": "ocm", "classifier": "frozen_orthogonal"}})
    with pytest.raises(ConfigError):
        parse_config({"augment": {"n_global": 0, "n_local": 2}})
    orth = parse_config({"objective": {"kind": "cosine_ce", "classifier": "frozen_orthogonal"},
                         "model": {"projector": {"bottleneck_dim": 4}}})
    with pytest.raises(ConfigError, match="orthogonal"):
        resolve(orth, 5)


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_training_hash_ignores_io_and_eval():
    a = RunConfig()
    b = parse_config({"io": {"run_name": "x", "output_dir": "elsewhere"}, "eval": {"short_side": 16}})
    c = parse_config({"io": {"seed": 3}})
    assert a.training_hash() == b.training_hash() != c.training_hash()
