import dataclasses

import pytest
import torch

from h2aseg.config import (
    ModelConfig,
    TENSOR_LAYOUT,
    TrainConfig,
    apply_overrides,
    check_volume,
    configs_from_mapping,
    effective_window,
    level_shape,
    load_kv_file,
    resolve_seed,
    validate_config,
)
from h2aseg.errors import ConfigError, ContractViolation


class TestValidateConfig:
    def test_defaults_are_ok_and_level5_is_one_window(self):
        rep = validate_config(ModelConfig(), TrainConfig())
        assert rep.ok, rep
        shape = level_shape((128, 128, 64), 5)
        assert shape == (8, 8, 4)
        assert effective_window((8, 8, 4), shape) == (8, 8, 4)

    def test_indivisible_patch_rejected(self):
        rep = validate_config(ModelConfig(), TrainConfig(patch_size=(100, 128, 64)))
        assert not rep.ok
        assert any("100" in e and "16" in e for e in rep.errors)

    def test_channel_length_mismatch_rejected(self):
        rep = validate_config(ModelConfig(channels=(16, 32)), TrainConfig())
        assert not rep.ok
        assert any("channels" in e for e in rep.errors)

    def test_oversized_window_reports_clamp_note(self):
        rep = validate_config(
            ModelConfig(depth=3, channels=(4, 8, 16), window_size=(8, 8, 8)),
            TrainConfig(patch_size=(16, 16, 8)),
        )
        assert rep.ok
        assert any("clamped" in n for n in rep.notes)

    def test_pure_and_deterministic(self):
        a = validate_config(ModelConfig(), TrainConfig(patch_size=(100, 128, 64)))
        b = validate_config(ModelConfig(), TrainConfig(patch_size=(100, 128, 64)))
        assert a.errors == b.errors and a.notes == b.notes


class TestLayout:
    def test_order(self):
        assert TENSOR_LAYOUT.order == ("batch", "channel", "height", "width", "depth")

    def test_check_volume_rejects_wrong_rank_and_channels(self):
        with pytest.raises(ContractViolation):
            check_volume(torch.zeros(2, 3, 4))
        with pytest.raises(ContractViolation):
            check_volume(torch.zeros(1, 3, 4, 4, 4), channels=2)
        check_volume(torch.zeros(1, 2, 4, 4, 4), channels=2)


class TestSeedResolution:
    def test_env_overrides_config(self, monkeypatch):
        monkeypatch.setenv("H2ASEG_SEED", "123")
        assert resolve_seed(TrainConfig(seed=7)) == 123

    def test_without_env_uses_config(self, monkeypatch):
        monkeypatch.delenv("H2ASEG_SEED", raising=False)
        assert resolve_seed(TrainConfig(seed=7)) == 7

    def test_bad_env_value_is_config_error(self, monkeypatch):
        monkeypatch.setenv("H2ASEG_SEED", "pi")
        with pytest.raises(ConfigError):
            resolve_seed(TrainConfig())


class TestKvFiles:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment\n"
            "depth = 3\n"
            "channels = 4,8,16\n"
            "window_size = 4,4,2\n"
            "use_mcsa = false\n"
            "learning_rate = 1e-3\n"
            "patch_size = 16,16,8\n"
            "phantom_pet_noise = 0.1\n"
        )
        model_cfg, train_cfg, phantom = configs_from_mapping(load_kv_file(path))
        assert model_cfg.depth == 3
        assert model_cfg.channels == (4, 8, 16)
        assert model_cfg.use_mcsa is False
        assert train_cfg.learning_rate == pytest.approx(1e-3)
        assert train_cfg.patch_size == (16, 16, 8)
        assert phantom == {"pet_noise": "0.1"}

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("depht = 3\n")
        with pytest.raises(ConfigError):
            configs_from_mapping(load_kv_file(path))

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("depth 3\n")
        with pytest.raises(ConfigError):
            load_kv_file(path)

    def test_shipped_presets_parse_and_validate(self):
        import importlib.resources

        for name in ("desk", "paper", "tiny"):
            preset = importlib.resources.files("h2aseg") / "presets" / f"{name}.cfg"
            model_cfg, train_cfg, _ = configs_from_mapping(load_kv_file(preset))
            assert validate_config(model_cfg, train_cfg).ok, name


def test_apply_overrides_skips_none():
    cfg = TrainConfig()
    out = apply_overrides(cfg, seed=5, learning_rate=None)
    assert out.seed == 5 and out.learning_rate == cfg.learning_rate
    assert dataclasses.replace(cfg, seed=5) == out
