"""YAML run configuration: defaults, validation, overrides."""

import dataclasses

import pytest
import yaml

from focusnet.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_from_mapping,
    load_run_config,
    num_classes,
    phantom_spec,
    save_run_config,
    snet_config,
    train_config,
    validate_run_config,
)
from focusnet.phantom import default_phantom_spec


def test_empty_mapping_gives_defaults():
    cfg = config_from_mapping({})
    assert cfg == RunConfig()
    assert cfg.snet.base_width == 24
    assert cfg.train.stage1.epochs == 60
    assert cfg.train.stage4.lr == 1e-4
    assert cfg.phantom.count == 50


def test_defaults_match_phantom_defaults():
    cfg = RunConfig()
    assert phantom_spec(cfg) == default_phantom_spec()
    assert num_classes(cfg) == 8


def test_partial_override_keeps_rest():
    cfg = config_from_mapping({"snet": {"base_width": 8}, "train": {"seed": 3}})
    assert cfg.snet.base_width == 8
    assert cfg.snet.num_downsamples == 1
    assert cfg.train.seed == 3
    assert cfg.train.stage2.epochs == 40


def test_unknown_keys_rejected_with_paths():
    with pytest.raises(ConfigError, match=r"snet\.depth"):
        config_from_mapping({"snet": {"depth": 4}})
    with pytest.raises(ConfigError, match="wholly_unknown"):
        config_from_mapping({"wholly_unknown": 1})


def test_multiple_errors_collected():
    with pytest.raises(ConfigError) as err:
        config_from_mapping({"snet": {"depth": 4}, "train": {"bogus": 1}})
    assert "snet.depth" in str(err.value)
    assert "train.bogus" in str(err.value)


def test_type_errors_have_dotted_paths():
    with pytest.raises(ConfigError, match=r"snet\.base_width"):
        config_from_mapping({"snet": {"base_width": "wide"}})
    with pytest.raises(ConfigError, match=r"phantom\.volume_shape"):
        config_from_mapping({"phantom": {"volume_shape": [96, 96]}})
    with pytest.raises(ConfigError, match=r"train\.stage1"):
        config_from_mapping({"train": {"stage1": 5}})


def test_bool_is_not_an_int():
    with pytest.raises(ConfigError, match="integer"):
        config_from_mapping({"snet": {"base_width": True}})


def test_optional_fields_accept_null():
    cfg = config_from_mapping({"train": {"sol_sigma": None, "sol_width": 6}})
    assert cfg.train.sol_sigma is None
    assert cfg.train.sol_width == 6
    cfg2 = config_from_mapping({"train": {"sol_sigma": 2.5}})
    assert cfg2.train.sol_sigma == 2.5


def test_organ_list_replaces_default():
    cfg = config_from_mapping(
        {
            "phantom": {
                "volume_shape": [32, 32, 32],
                "organs": [
                    {
                        "class_id": 1,
                        "target_fraction": 0.01,
                        "shape_family": "ellipsoid",
                        "intensity_mean": 0.6,
                        "intensity_contrast": 0.3,
                    }
                ],
            }
        }
    )
    assert len(cfg.phantom.organs) == 1
    assert cfg.phantom.organs[0].class_id == 1
    assert num_classes(cfg) == 2
    with pytest.raises(ConfigError, match=r"organs\[0\]\.radius"):
        config_from_mapping({"phantom": {"organs": [{"radius": 3}]}})


def test_root_must_be_mapping():
    with pytest.raises(ConfigError, match="mapping"):
        config_from_mapping([1, 2, 3])


def test_yaml_round_trip(tmp_path):
    cfg = config_from_mapping({"train": {"roi_factor": 2.0}, "loss": {"gamma": 1.5}})
    path = tmp_path / "run.yaml"
    save_run_config(cfg, path)
    assert load_run_config(path) == cfg


def test_empty_file_is_default(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_run_config(path) == RunConfig()


def test_malformed_yaml_raises(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("snet: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_run_config(path)


def test_saved_file_is_plain_yaml(tmp_path):
    path = tmp_path / "out.yaml"
    save_run_config(RunConfig(), path)
    doc = yaml.safe_load(path.read_text())
    assert doc["snet"]["aspp_rates"] == [3, 6, 12, 18]
    assert doc["phantom"]["volume_shape"] == [96, 96, 96]


def test_apply_overrides_types():
    cfg = apply_overrides(
        RunConfig(),
        ["train.roi_factor=2", "snet.base_width=8", "train.stage1.epochs=5"],
    )
    assert cfg.train.roi_factor == 2.0
    assert isinstance(cfg.train.roi_factor, float)
    assert cfg.snet.base_width == 8
    assert cfg.train.stage1.epochs == 5


def test_apply_overrides_sequences_and_null():
    cfg = apply_overrides(
        RunConfig(), ["snet.aspp_rates=[2, 4]", "train.sol_width=null"]
    )
    assert cfg.snet.aspp_rates == (2, 4)
    assert cfg.train.sol_width is None


def test_apply_overrides_rejects_bad_paths():
    with pytest.raises(ConfigError, match="no such config path"):
        apply_overrides(RunConfig(), ["snet.depth=4"])
    with pytest.raises(ConfigError, match="path=value"):
        apply_overrides(RunConfig(), ["snet.base_width"])
    with pytest.raises(ConfigError, match="empty path segment"):
        apply_overrides(RunConfig(), [".=3"])


def test_override_then_validation_applies():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["loss.gamma=-1"])


def test_train_config_builder():
    cfg = config_from_mapping({"snet": {"base_width": 8}, "train": {"sos_width": 12}})
    tc = train_config(cfg)
    assert tc.snet.num_classes == 8
    assert tc.snet.base_width == 8
    assert tc.sos_width == 12
    assert tc.stage4.lr == 1e-4
    assert tc.loss == cfg.loss


def test_snet_config_counts_classes_from_organs():
    cfg = config_from_mapping({})
    sc = snet_config(cfg)
    assert sc.num_classes == 1 + max(o.class_id for o in cfg.phantom.organs)


def test_validate_surfaces_value_errors():
    bad = config_from_mapping({"phantom": {"volume_shape": [4, 4, 4]}})
    with pytest.raises(ConfigError):
        validate_run_config(bad)
    validate_run_config(RunConfig())  # defaults are valid


def test_sections_are_frozen():
    cfg = RunConfig()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.snet.base_width = 1
