"""Run-config loading: presets, strict keys, overrides, round trips."""
import math

import pytest
import yaml

from coopfusion.config import (CONFIG_VERSION, ConfigError, RunConfig,
                               apply_overrides, config_from_mapping,
                               desk_config, dump_config, load_config,
                               paper_scale_config, validate_run_config)


def test_desk_defaults():
    cfg = desk_config()
    assert cfg.version == CONFIG_VERSION
    assert cfg.model.channels == 64 and cfg.model.depth_bins == 32
    assert cfg.model.ego_slots == 64 and cfg.model.collab_slots == 32
    assert cfg.train.epochs == 40
    assert cfg.data.train_scenes == 500 and cfg.data.test_scenes == 100
    validate_run_config(cfg)


def test_paper_scale_preset():
    cfg = paper_scale_config()
    assert cfg.model.channels == 256 and cfg.model.depth_bins == 80
    assert cfg.model.ego_slots == 600 and cfg.model.collab_slots == 200
    assert cfg.model.cameras == 4 and cfg.scene.rig.count == 4
    assert cfg.scene.rig.yaw_offsets == (-3 * math.pi / 4, -math.pi / 4,
                                         math.pi / 4, 3 * math.pi / 4)
    assert cfg.scene.rig.d_min == 0.5 and cfg.scene.rig.d_max == 60.5
    assert cfg.scene.extent == 51.2
    assert cfg.train.epochs == 72 and cfg.train.lr == 1e-4
    validate_run_config(cfg)


def test_load_minimal_file(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("version: 1\nout_dir: runs/exp1\ntrain:\n  epochs: 3\n")
    cfg = load_config(str(p))
    assert cfg.out_dir == "runs/exp1"
    assert cfg.train.epochs == 3
    assert cfg.train.lr == desk_config().train.lr  # untouched defaults


def test_load_preset_reference(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("version: 1\npreset: paper_scale\ntrain:\n  epochs: 1\n")
    cfg = load_config(str(p))
    assert cfg.model.channels == 256 and cfg.train.epochs == 1


def test_version_required():
    with pytest.raises(ConfigError, match="version"):
        config_from_mapping({"out_dir": "x"})
    with pytest.raises(ConfigError, match="version"):
        config_from_mapping({"version": 2})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="train.lerning_rate"):
        config_from_mapping({"version": 1, "train": {"lerning_rate": 0.1}})
    with pytest.raises(ConfigError, match="scene.rig.focle"):
        config_from_mapping({"version": 1, "scene": {"rig": {"focle": 2}}})
    with pytest.raises(ConfigError, match="bogus"):
        config_from_mapping({"version": 1, "bogus": {}})


def test_type_checks():
    with pytest.raises(ConfigError, match="train.epochs"):
        config_from_mapping({"version": 1, "train": {"epochs": 2.5}})
    with pytest.raises(ConfigError, match="model.per_row_mixing"):
        config_from_mapping({"version": 1, "model": {"per_row_mixing": "yes"}})
    cfg = config_from_mapping({"version": 1, "train": {"lr": "1e-3"}})
    assert cfg.train.lr == 1e-3  # YAML 1.1 exponent-string quirk handled


def test_nested_validation_surfaces_as_config_error():
    with pytest.raises(ConfigError, match="yaw_offsets"):
        config_from_mapping({"version": 1, "scene": {"rig": {"count": 3}}})
    with pytest.raises(ConfigError, match="overlap"):
        config_from_mapping({"version": 1,
                             "data": {"test_seed_start": 0,
                                      "train_seed_start": 0}})


def test_cross_section_consistency():
    with pytest.raises(ConfigError, match="model.channels"):
        config_from_mapping({"version": 1, "model": {"channels": 128}})
    ok = config_from_mapping({"version": 1, "model": {"channels": 32},
                              "scene": {"feature": {"channels": 32}}})
    assert ok.model.channels == 32


def test_overrides():
    cfg = desk_config()
    out = apply_overrides(cfg, ["train.lr=1e-3", "model.sta_motion=false",
                                "out_dir=runs/o1", "scene.num_vehicles=7"])
    assert out.train.lr == 1e-3
    assert out.model.sta_motion is False
    assert out.out_dir == "runs/o1"
    assert out.scene.num_vehicles == 7
    assert cfg.train.lr == 2e-3  # original untouched


def test_override_rejections():
    cfg = desk_config()
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides(cfg, ["train.lr"])
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(cfg, ["train.bogus=1"])
    with pytest.raises(ConfigError, match="scalar"):
        apply_overrides(cfg, ["model.window_radii=[1,2]"])
    with pytest.raises(ConfigError, match="scalar"):
        apply_overrides(cfg, ["scene.rig=3"])
    with pytest.raises(ConfigError, match="model.channels"):
        apply_overrides(cfg, ["model.channels=128"])  # breaks consistency


def test_dump_round_trip():
    for cfg in (desk_config(), paper_scale_config()):
        text = dump_config(cfg)
        back = config_from_mapping(yaml.safe_load(text))
        assert back == cfg
    assert dump_config(desk_config()) == dump_config(RunConfig())


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/run.yaml")


def test_invalid_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("version: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(str(p))


def test_root_must_be_mapping(tmp_path):
    p = tmp_path / "list.yaml"
    p.write_text("- a\n- b\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(str(p))
