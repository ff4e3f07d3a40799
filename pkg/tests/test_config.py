import json
import os

import pytest

from gdvm.config import RunConfig, SweepSpec, load_config, load_sweep, save_config
from gdvm.errors import ConfigError

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def base_dict(**changes):
    d = {
        "variant": "gdvm",
        "beta": 0.5,
        "latent_dim": 2,
        "architecture": {
            "trunk": [{"kind": "dense", "out": 8}, {"kind": "relu"}],
            "classifier": [{"kind": "dense", "out": 3}, {"kind": "softmax"}],
            "mu_activation": None,
        },
        "dataset": {"generator": "blobs", "params": {"n_classes": 3, "n_per_class": 20, "dim": 2, "spread": 0.3},
                    "test_fraction": 0.25, "seed": 1},
        "optimizer": {"kind": "adam", "lr": 0.01},
        "epochs": 2,
        "batch_size": 16,
        "seeds": [1, 2],
    }
    d.update(changes)
    return d


def test_round_trip(tmp_path):
    cfg = RunConfig.from_dict(base_dict(out_dir=str(tmp_path / "runs")))
    path = tmp_path / "c.json"
    save_config(cfg, path)
    again = load_config(path)
    assert again == cfg
    assert RunConfig.from_dict(json.loads(path.read_text())).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("field,value", [
    ("beta", -1.0), ("latent_dim", 0), ("epochs", -1), ("batch_size", 0), ("seeds", []),
    ("variant", "vae"), ("dtype", "float16"),
])
def test_invalid_fields_are_named(field, value):
    with pytest.raises(ConfigError, match=field):
        RunConfig.from_dict(base_dict(**{field: value}))


def test_unknown_and_missing_keys():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict(base_dict(learning_rate=0.1))
    d = base_dict()
    del d["architecture"]
    with pytest.raises(ConfigError, match="architecture"):
        RunConfig.from_dict(d)
    with pytest.raises(ConfigError, match="optimizer"):
        RunConfig.from_dict(base_dict(optimizer={"kind": "lbfgs"}))
    with pytest.raises(ConfigError, match="dataset"):
        RunConfig.from_dict(base_dict(dataset={"generator": "cifar"}))


def test_overrides_revalidate():
    cfg = RunConfig.from_dict(base_dict())
    assert cfg.with_overrides(seeds=[9]).seeds == [9]
    with pytest.raises(ConfigError):
        cfg.with_overrides(beta=-2)


def test_relative_idx_paths_resolve_against_config(tmp_path):
    d = base_dict(dataset={"generator": "idx", "params": {"images": "data/i", "labels": "data/l"}})
    path = tmp_path / "sub" / "c.json"
    path.parent.mkdir()
    path.write_text(json.dumps(d))
    cfg = load_config(path)
    assert cfg.dataset.params["images"] == str(tmp_path / "sub" / "data" / "i")
    assert cfg.out_dir == str(tmp_path / "sub" / "runs")


def test_sweep_spec():
    s = SweepSpec.from_dict({"betas": [0.1, 1.0], "epochs": [5], "metric": "accuracy"})
    s.check_task("multiclass")
    with pytest.raises(ConfigError, match="metric"):
        s.check_task("multilabel")
    with pytest.raises(ConfigError, match="betas"):
        SweepSpec([], [1], "accuracy")
    with pytest.raises(ConfigError, match="epochs"):
        SweepSpec([0.1], [], "top1")


def test_shipped_configs_validate():
    names = sorted(os.listdir(CONFIG_DIR))
    assert names
    for name in names:
        path = os.path.join(CONFIG_DIR, name)
        if name.endswith("-selection.json"):
            continue
        if name.startswith("sweep"):
            load_sweep(path)
        else:
            cfg = load_config(path)
            cfg.arch()
