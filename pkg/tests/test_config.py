# tests/test_config.py
import logging

import pytest

from app.config import PRESETS, RunConfig, apply_overrides, configure_logging, get_preset, load_run_config, preset_names
from app.errors import ConfigError


@pytest.fixture
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield root
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(level)


@pytest.mark.unit
class TestLoadRunConfig:
    """Config file < PRTM_* environment < flags"""

    def test_defaults(self):
        run = load_run_config()
        assert run.preset == "desk"
        assert run.strategy == "self"
        assert run.modalities == ("text", "cine", "numeric")
        assert run.seed is None

    def test_precedence(self, tmp_path, monkeypatch):
        config = tmp_path / "run.env"
        config.write_text("SEED=3\nEPOCHS=5\nSTRATEGY=fixed:0.5,0.25,0.25\n")
        assert load_run_config(config).seed == 3
        monkeypatch.setenv("PRTM_SEED", "4")
        run = load_run_config(config)
        assert (run.seed, run.epochs) == (4, 5)
        run = load_run_config(config, {"seed": 9, "epochs": None})
        assert (run.seed, run.epochs, run.strategy) == (9, 5, "fixed:0.5,0.25,0.25")

    def test_unknown_key(self, tmp_path):
        config = tmp_path / "run.env"
        config.write_text("SEED=3\nBATCH=8\n")
        with pytest.raises(ConfigError, match="unknown config key 'BATCH'"):
            load_run_config(config)

    def test_key_without_value(self, tmp_path):
        config = tmp_path / "run.env"
        config.write_text("SEED\n")
        with pytest.raises(ConfigError, match="no value"):
            load_run_config(config)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "absent.env")

    def test_invalid_value_is_config_error(self, monkeypatch):
        monkeypatch.setenv("PRTM_EPOCHS", "zero")
        with pytest.raises(ConfigError, match="epochs"):
            load_run_config()

    @pytest.mark.parametrize(
        "value,expected",
        [("text+numeric", ("text", "numeric")), ("numeric, text", ("text", "numeric")), ("cine", ("cine",))],
    )
    def test_modalities_normalized(self, value, expected):
        assert load_run_config(overrides={"modalities": value}).modalities == expected

    @pytest.mark.parametrize("value", ["audio", "text,audio", ""])
    def test_modalities_rejected(self, value):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"modalities": value})

    def test_log_level(self):
        assert load_run_config(overrides={"log_level": "debug"}).log_level == "DEBUG"
        with pytest.raises(ConfigError):
            load_run_config(overrides={"log_level": "loud"})


@pytest.mark.unit
class TestPresets:
    def test_known_presets(self):
        assert set(PRESETS) == {"desk", "paper"}
        paper = get_preset("paper")
        assert paper.name == "paper"
        assert paper.cohort.cine_shape == (512, 512, 16)
        assert (paper.text.max_len, paper.text.width, paper.train.epochs) == (512, 768, 500)
        desk = get_preset("desk")
        assert (desk.cohort.n_clinical, desk.cohort.n_cine) == (688, 136)
        assert desk.segmenter.volume_shape == desk.cohort.cine_shape

    def test_desk_text_encoder_keeps_native_width(self):
        """Fewer tokens and blocks at desk scale, but the pooled vector is the encoder width"""
        text = get_preset("desk").text
        assert (text.max_len, text.blocks, text.width, text.pooled_dim) == (64, 2, 768, 768)

    def test_full_is_an_alias(self):
        assert get_preset("full") is get_preset("paper")
        assert preset_names() == ["desk", "full", "paper"]

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="desk"):
            get_preset("huge")

    def test_overrides_reach_cohort_and_training(self):
        run = RunConfig(seed=11, n=40, cine=8, epochs=2, learning_rate=0.01)
        preset = apply_overrides(get_preset("desk"), run)
        assert (preset.cohort.seed, preset.train.seed) == (11, 11)
        assert (preset.cohort.n_clinical, preset.cohort.n_cine) == (40, 8)
        assert (preset.train.epochs, preset.train.learning_rate) == (2, 0.01)
        assert get_preset("desk").train.epochs == 50

    def test_inconsistent_overrides(self):
        with pytest.raises(ConfigError, match="desk"):
            apply_overrides(get_preset("desk"), RunConfig(n=5, cine=10))


@pytest.mark.unit
class TestConfigureLogging:
    def test_run_log_gets_timestamps(self, tmp_path, restore_root_logger):
        log_file = tmp_path / "logs" / "run.log"
        configure_logging("debug", log_file)
        logging.getLogger("app.test").info("cohort written")
        for handler in restore_root_logger.handlers:
            handler.flush()
        line = log_file.read_text().splitlines()[-1]
        assert line.endswith("INFO app.test: cohort written")
        assert line[:4].isdigit()
        assert restore_root_logger.level == logging.DEBUG

    def test_replaces_previous_handlers(self, restore_root_logger):
        configure_logging("INFO")
        configure_logging("WARNING")
        assert len(restore_root_logger.handlers) == 1
