import os
from dataclasses import fields

import pytest
import yaml

from config.config_module import load_run_config, parse_run_config
from core.core_module import ConfigError
from divergence.divergence_module import DivergenceKind

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def _minimal(**overrides):
    doc = {
        "model": {"hidden_dims": [4], "num_classes": 2},
        "train": {"lambda": 10.0, "rho": 0.05, "batch_size": 8, "epochs": 3},
        "data": {"kind": "two_circles"},
    }
    doc.update(overrides)
    return doc


def test_defaults_are_filled():
    cfg = parse_run_config(_minimal())
    assert cfg.train.lam == 10.0
    assert cfg.train.smoothness.rho == 0.05
    assert cfg.train.smoothness.divergence is DivergenceKind.SQ_HELLINGER
    assert cfg.data.options["n_per_class"] == 300
    assert cfg.model.input_dim == 2


def test_unknown_keys_are_reported_together():
    doc = _minimal(colour="blue")
    doc["train"]["momentum"] = 0.9
    doc["data"]["radius"] = 3
    with pytest.raises(ConfigError) as info:
        parse_run_config(doc)
    joined = "\n".join(info.value.diagnostics)
    assert "colour" in joined and "train.momentum" in joined and "data.radius" in joined


@pytest.mark.parametrize("doc", [
    _minimal(train={"lambda": 1.0, "batch_size": 1}),
    _minimal(data={"kind": "parquet"}),
    _minimal(data={"kind": "idx"}),
    _minimal(smoothness={"grid": [-1.0, 0.5]}),
    _minimal(snapshot_epochs=[0]),
    _minimal(model={"hidden_dims": [4], "num_classes": 1}),
    [1, 2, 3],
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        parse_run_config(doc)


def test_shipped_configs_parse():
    for path in ("two_circles.yaml", "two_circles_supervised.yaml", "mnist_012.yaml"):
        cfg = load_run_config(os.path.join(CONFIG_DIR, path))
        assert cfg.train.epochs >= 1


def test_echo_round_trips(tmp_path):
    cfg = parse_run_config(_minimal(name="echo", smoothness={"k": 3, "divergence": "kl"}))
    path = tmp_path / "echo.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    again = load_run_config(str(path))
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("doc, field", [
    (_minimal(checkpoint_every="often"), "checkpoint_every"),
    (_minimal(snapshot_epochs=5), "snapshot_epochs"),
    (_minimal(heatmap={"bbox": 3}), "heatmap.bbox"),
    (_minimal(heatmap={"bbox": [1.0, -1.0, -3.0, 3.0]}), "heatmap.bbox"),
    (_minimal(heatmap={"resolution": "fine"}), "heatmap.resolution"),
    (_minimal(data={"kind": "two_circles", "n_per_class": "many"}), "data.n_per_class"),
    (_minimal(data={"kind": "idx", "train_images": "a", "train_labels": "b", "standardize": "yes"}),
     "data.standardize"),
    (_minimal(train={"lambda": 1.0, "rho": 0.1, "batch_size": 8.5, "epochs": 2}), "train.batch_size"),
    (_minimal(smoothness={"grid": "wide"}), "smoothness.grid"),
    (_minimal(seed=True), "seed"),
])
def test_malformed_values_are_diagnosed(doc, field):
    with pytest.raises(ConfigError) as info:
        parse_run_config(doc)
    assert any(d.startswith(f"{field}:") for d in info.value.diagnostics), info.value.diagnostics


def test_type_errors_do_not_hide_other_problems():
    with pytest.raises(ConfigError) as info:
        parse_run_config(_minimal(checkpoint_every="often", colour="blue", heatmap={"resolution": 1}))
    joined = "\n".join(info.value.diagnostics)
    assert "checkpoint_every" in joined and "colour" in joined and "heatmap.resolution" in joined


def test_deterministic_switch_is_run_level():
    cfg = parse_run_config(_minimal(deterministic=True))
    assert cfg.deterministic is True
    assert "deterministic" not in {f.name for f in fields(cfg.train)}
    assert "deterministic" not in cfg.to_dict()["train"]
