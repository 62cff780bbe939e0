"""Тесты для конфигурации запуска."""
import pytest

from pm_robopt.config import (
    SNAPSHOT_NAME,
    ConfigError,
    config_to_ini,
    parse_config,
    parse_config_text,
    resolve_output_dir,
    write_snapshot,
)
from pm_robopt.const import *


CUSTOM_CONFIG = """
[geometry]
p1 = 9.5
refinement = 1

[scenario]
kind = A+B   # оба сценария цикла
delta_v = 0.1

[solver]
lambda = 0
seed = 7
workers = 4

[output]
dir = results
"""


class TestParse:
    """Тесты для разбора файла конфигурации."""

    def test_empty_gives_defaults(self):
        """Тест значений по умолчанию."""
        config = parse_config_text("")
        assert config.scenario["delta_v"] == DEFAULT_DELTA_V
        assert config.scenario["kind"] == SCENARIO_C
        assert config.solver["lambda"] == DEFAULT_LAMBDA
        assert config.p_init == DEFAULT_P
        assert config.output_dir == "out"
        assert config.pole_geometry.p == DEFAULT_P

    def test_custom_values(self):
        """Тест пользовательских значений и приведения типов."""
        config = parse_config_text(CUSTOM_CONFIG)
        assert config.geometry["p1"] == 9.5
        assert config.refinement == 1
        assert config.scenario["kind"] == SCENARIO_AB
        assert config.scenario_params.delta_v == 0.1
        assert config.solver["lambda"] == 0.0
        assert config.solver["workers"] == 4
        assert isinstance(config.solver["seed"], int)

    @pytest.mark.parametrize("text, key", [
        ("[scenario]\nalpha = 1.5\n", "alpha"),
        ("[scenario]\ndelta_rr = 0.9\n", "delta_rr"),
        ("[scenario]\nkind = D\n", "kind"),
        ("[solver]\nlambda = -1\n", "lambda"),
        ("[geometry]\np1 = abc\n", "p1"),
        ("[solver]\nsg_level = 9\n", "sg_level"),
    ])
    def test_invalid_value(self, text, key):
        """Тест значения вне допустимой области."""
        with pytest.raises(ConfigError, match=key):
            parse_config_text(text)

    def test_unknown_key(self):
        """Тест неизвестного ключа."""
        with pytest.raises(ConfigError, match="bogus"):
            parse_config_text("[solver]\nbogus = 1\n")

    def test_unknown_section(self):
        """Тест неизвестной секции."""
        with pytest.raises(ConfigError, match="weather"):
            parse_config_text("[weather]\nrain = 1\n")

    def test_unparsable(self):
        """Тест синтаксической ошибки."""
        with pytest.raises(ConfigError):
            parse_config_text("p1 = 3\n")

    def test_bounds_order(self):
        """Тест перепутанных границ проекта."""
        with pytest.raises(ConfigError, match="p2_min"):
            parse_config_text("[solver]\np2_min = 30\n")

    def test_magnet_outside_window(self):
        """Тест магнита, который не помещается в окно."""
        with pytest.raises(ConfigError):
            parse_config_text("[geometry]\np1 = 10\np2 = 25\np3 = 5\n")

    def test_missing_file(self, tmp_path):
        """Тест отсутствующего файла."""
        with pytest.raises(ConfigError, match="not found"):
            parse_config(str(tmp_path / "missing.ini"))

    def test_file(self, tmp_path):
        """Тест чтения файла."""
        path = tmp_path / "run.ini"
        path.write_text(CUSTOM_CONFIG, encoding="utf-8")
        assert parse_config(str(path)) == parse_config_text(CUSTOM_CONFIG)


class TestSnapshot:
    """Тесты для снимка конфигурации."""

    def test_round_trip(self):
        """Тест разбора снимка в ту же конфигурацию."""
        config = parse_config_text(CUSTOM_CONFIG)
        assert parse_config_text(config_to_ini(config)) == config

    def test_write(self, tmp_path):
        """Тест записи снимка в каталог результатов."""
        config = parse_config_text("[solver]\nfd_step = 0.0001\n")
        path = write_snapshot(config, str(tmp_path))
        assert path.endswith(SNAPSHOT_NAME)
        text = (tmp_path / SNAPSHOT_NAME).read_text(encoding="utf-8")
        assert "[solver]" in text
        assert "fd_step = 0.0001" in text
        assert parse_config_text(text) == config


class TestOutputDir:
    """Тесты для выбора каталога результатов."""

    def test_config_value(self, monkeypatch):
        """Тест значения из файла."""
        monkeypatch.delenv(ENV_OUTPUT_DIR, raising=False)
        assert resolve_output_dir(parse_config_text(CUSTOM_CONFIG)) == "results"

    def test_environment(self, monkeypatch):
        """Тест переменной окружения."""
        monkeypatch.setenv(ENV_OUTPUT_DIR, "/tmp/env-out")
        assert resolve_output_dir(parse_config_text(CUSTOM_CONFIG)) == "/tmp/env-out"

    def test_override(self, monkeypatch):
        """Тест приоритета аргумента командной строки."""
        monkeypatch.setenv(ENV_OUTPUT_DIR, "/tmp/env-out")
        assert resolve_output_dir(parse_config_text(CUSTOM_CONFIG), "cli-out") == "cli-out"
