"""Тесты для командной строки."""
import json
from unittest.mock import patch

import pytest

from pm_robopt.cli import MANIFEST_NAME, build_parser, main
from pm_robopt.config import SNAPSHOT_NAME
from pm_robopt.const import *


@pytest.fixture
def config_file(tmp_path):
    """Файл конфигурации с малым числом выборок."""
    path = tmp_path / "run.ini"
    path.write_text("[solver]\nn_mc = 8\nsg_level = 1\n\n[output]\ndir = unused\n", encoding="utf-8")
    return path


def _run(*argv):
    return main([str(a) for a in argv])


def _manifest(out):
    return json.loads((out / MANIFEST_NAME).read_text(encoding="utf-8"))


class TestParser:
    """Тесты для разбора аргументов."""

    def test_commands(self):
        """Тест списка команд."""
        args = build_parser().parse_args(["table1", "--config", "x.ini", "--seed", "3", "--workers", "2"])
        assert args.command == "table1"
        assert args.seed == 3
        assert args.workers == 2

    def test_unknown_command(self):
        """Тест неизвестной команды."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["plot", "--config", "x.ini"])

    def test_config_required(self):
        """Тест обязательного файла конфигурации."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["table1"])


class TestCommands:
    """Тесты для команд без FEM."""

    def test_table1(self, config_file, tmp_path):
        """Тест таблицы числа вычислений."""
        out = tmp_path / "out"
        assert _run("table1", "--config", config_file, "--out", out) == 0
        lines = (out / "table1.csv").read_text().splitlines()
        assert lines[0] == "d,full,sparse"
        assert lines[1] == "5,3125,241"
        assert lines[4].endswith(",5021")
        assert (out / SNAPSHOT_NAME).exists()

    def test_cycle(self, config_file, tmp_path):
        """Тест экспорта цикла и сценариев."""
        out = tmp_path / "out"
        assert _run("cycle", "--config", config_file, "--out", out) == 0
        lines = (out / "udc.csv").read_text().splitlines()
        assert lines[0] == "t,v"
        assert len(lines) == 17
        assert lines[-1] == "195,0"
        for name in ("cycle_A.csv", "cycle_B.csv", "cycle_AB.csv", "heatmap.csv"):
            assert (out / name).exists()

    def test_cycle_seeded(self, config_file, tmp_path):
        """Тест воспроизводимости случайных сценариев по seed."""
        first, second, other = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        _run("cycle", "--config", config_file, "--out", first, "--seed", 11)
        _run("cycle", "--config", config_file, "--out", second, "--seed", 11)
        _run("cycle", "--config", config_file, "--out", other, "--seed", 12)
        assert (first / "cycle_AB.csv").read_bytes() == (second / "cycle_AB.csv").read_bytes()
        assert (first / "cycle_AB.csv").read_bytes() != (other / "cycle_AB.csv").read_bytes()

    def test_manifest(self, config_file, tmp_path):
        """Тест манифеста запуска."""
        out = tmp_path / "out"
        _run("table1", "--config", config_file, "--out", out, "--seed", 5)
        manifest = _manifest(out)
        assert manifest["command"] == "table1"
        assert manifest["failed_stage"] is None
        assert [stage["name"] for stage in manifest["stages"]] == ["table1"]
        assert manifest["config"]["solver"]["seed"] == 5
        paths = {entry["path"]: entry["sha256"] for entry in manifest["files"]}
        assert set(paths) == {SNAPSHOT_NAME, "table1.csv"}
        assert all(len(digest) == 64 for digest in paths.values())

    def test_environment_output_dir(self, config_file, tmp_path, monkeypatch):
        """Тест каталога из переменной окружения."""
        out = tmp_path / "env"
        monkeypatch.setenv(ENV_OUTPUT_DIR, str(out))
        assert _run("table1", "--config", config_file) == 0
        assert (out / "table1.csv").exists()


class TestErrors:
    """Тесты для кодов выхода."""

    def test_invalid_config(self, tmp_path, capsys):
        """Тест некорректной конфигурации."""
        path = tmp_path / "bad.ini"
        path.write_text("[scenario]\nalpha = 1.5\n", encoding="utf-8")
        assert _run("table1", "--config", path, "--out", tmp_path / "out") == 2
        assert "alpha" in capsys.readouterr().err
        assert not (tmp_path / "out").exists()

    def test_missing_config(self, tmp_path, capsys):
        """Тест отсутствующего файла."""
        assert _run("table1", "--config", tmp_path / "missing.ini") == 2
        assert "not found" in capsys.readouterr().err

    def test_invalid_override(self, config_file, tmp_path):
        """Тест недопустимого числа потоков."""
        assert _run("table1", "--config", config_file, "--out", tmp_path / "out", "--workers", 0) == 2

    def test_domain_failure(self, tmp_path):
        """Тест отказа этапа: машина не тянет цикл."""
        path = tmp_path / "weak.ini"
        path.write_text(
            "[materials]\ni_max = 0.5\n\n[solver]\ne_d = 0.5\nm_max_d = 1\nsg_level = 0\n",
            encoding="utf-8",
        )
        out = tmp_path / "out"
        assert _run("optimize", "--config", path, "--out", out) == 1
        manifest = _manifest(out)
        assert manifest["failed_stage"] == "optimize"
        assert manifest["stages"][-1]["status"] == "failed"
        assert "infeasible" in manifest["error"]


    def test_unexpected_failure_keeps_manifest(self, config_file, tmp_path):
        """Тест манифеста при непредвиденной ошибке этапа."""
        out = tmp_path / "out"
        with patch("pm_robopt.cli.Pipeline.stage_table1", side_effect=OSError("disk full")):
            assert _run("table1", "--config", config_file, "--out", out) == 1
        manifest = _manifest(out)
        assert manifest["failed_stage"] == "table1"
        assert manifest["stages"] == [{"name": "table1", "seconds": manifest["stages"][0]["seconds"],
                                       "status": "failed"}]
        assert manifest["error"] == "OSError: disk full"
        assert [entry["path"] for entry in manifest["files"]] == [SNAPSHOT_NAME]


@pytest.mark.slow
class TestReproducibility:
    """Тесты для повторяемости расчёта."""

    def test_validate_twice(self, config_file, tmp_path):
        """Тест побайтно одинаковой проверки."""
        first, second = tmp_path / "a", tmp_path / "b"
        assert _run("validate", "--config", config_file, "--out", first, "--workers", 1) == 0
        assert _run("validate", "--config", config_file, "--out", second, "--workers", 4) == 0
        assert (first / "validation.csv").read_bytes() == (second / "validation.csv").read_bytes()
        lines = (first / "validation.csv").read_text().splitlines()
        assert lines[1].startswith("C,initial,")


@pytest.mark.slow
class TestPipeline:
    """Тесты для полных команд на уровне сетки 1."""

    def test_crossval(self, config_file, tmp_path):
        """Тест матрицы перекрёстной проверки."""
        out = tmp_path / "out"
        assert _run("crossval", "--config", config_file, "--out", out, "--workers", 4) == 0
        lines = (out / "crossval.csv").read_text().splitlines()
        assert lines[0] == "design,area,A,B,A+B,C"
        rows = [line.split(",") for line in lines[1:]]
        assert [row[0] for row in rows] == list(SCENARIOS)
        for row in rows:
            assert float(row[1]) > 0
            assert all(0.0 <= float(sr) <= 100.0 for sr in row[2:])
        reports = (out / "crossval_reports.csv").read_text().splitlines()
        assert len(reports) == 1 + len(SCENARIOS) * 4

    def test_all(self, config_file, tmp_path):
        """Тест всех этапов подряд."""
        out = tmp_path / "out"
        assert _run("all", "--config", config_file, "--out", out, "--workers", 4) == 0
        manifest = _manifest(out)
        assert [stage["name"] for stage in manifest["stages"]] == [
            "cycle", "table1", "solve_machine", "optimize", "validate", "crossval",
        ]
        assert all(stage["status"] == "ok" for stage in manifest["stages"])
        paths = {entry["path"] for entry in manifest["files"]}
        for name in ("udc.csv", "table1.csv", "efficiency_map.csv", "optimum.json", "trace.csv",
                     "efficiency_diff.csv", "validation.csv", "crossval.csv"):
            assert name in paths
        diff = (out / "efficiency_diff.csv").read_text().splitlines()
        assert diff[0] == "I,omega_rpm,deff"
        assert len(diff) == 1 + 41 * 41
        assert (out / "validation.csv").read_text().splitlines()[1].startswith("C,C,")
