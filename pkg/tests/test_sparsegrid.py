"""Тесты для разреженных сеток."""
import numpy as np
import pytest

from pm_robopt.sparsegrid import (
    GridBudgetError,
    ParameterDimension,
    ParameterSpace,
    SparseGridError,
    cc_rule,
    moments,
    points_for_level,
    smolyak,
    smolyak_level3_count,
    table1_rows,
    tensor_grid,
    write_grid_csv,
)


class TestClenshawCurtis:
    """Тесты для одномерного правила."""

    def test_points_for_level(self):
        """Тест числа узлов по уровню."""
        assert [points_for_level(l) for l in range(4)] == [1, 3, 5, 9]
        with pytest.raises(SparseGridError):
            points_for_level(-1)

    def test_level0(self):
        """Тест правила средней точки."""
        rule = cc_rule(0)
        assert rule.nodes.tolist() == [0.0]
        assert rule.weights.tolist() == [1.0]

    def test_level1(self):
        """Тест правила из трёх точек."""
        rule = cc_rule(1)
        np.testing.assert_allclose(rule.nodes, [-1.0, 0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(rule.weights, [1 / 6, 4 / 6, 1 / 6], rtol=1e-14)

    def test_level2_fourth_moment(self):
        """Тест E[z^4] = 1/5."""
        rule = cc_rule(2)
        assert abs(rule.weights @ rule.nodes ** 4 - 0.2) < 1e-14

    @pytest.mark.parametrize("level", [1, 2, 3, 4])
    def test_nested_and_normalized(self, level):
        """Тест вложенности и нормировки весов."""
        coarse, fine = cc_rule(level - 1), cc_rule(level)
        assert fine.weights.sum() == pytest.approx(1.0, abs=1e-14)
        for z in coarse.nodes:
            assert np.min(np.abs(fine.nodes - z)) < 1e-15
        np.testing.assert_array_equal(fine.nodes, -fine.nodes[::-1])


class TestSmolyak:
    """Тесты для сетки Смоляка."""

    @pytest.mark.parametrize("d, expected", [(5, 241), (7, 589), (11, 2069), (15, 5021)])
    def test_level3_counts(self, d, expected):
        """Тест числа узлов третьего уровня."""
        assert len(smolyak(d, 3)) == expected
        assert smolyak_level3_count(d) == expected

    def test_level0(self):
        """Тест сетки нулевого уровня."""
        grid = smolyak(4, 0)
        assert len(grid) == 1
        np.testing.assert_array_equal(grid.points, np.zeros((1, 4)))
        assert grid.weights.tolist() == [1.0]

    def test_zero_dimension(self):
        """Тест пустого пространства."""
        grid = smolyak(0, 3)
        assert len(grid) == 1
        assert grid.weights.tolist() == [1.0]

    def test_one_dimension_is_rule(self):
        """Тест совпадения с одномерным правилом."""
        grid = smolyak(1, 3)
        rule = cc_rule(3)
        order = np.argsort(grid.points[:, 0])
        np.testing.assert_allclose(grid.points[order, 0], rule.nodes, atol=1e-15)
        np.testing.assert_allclose(grid.weights[order], rule.weights, rtol=1e-12)

    def test_polynomial_exactness(self):
        """Тест точности для многочленов малой степени."""
        grid = smolyak(3, 3)
        z = grid.points
        assert grid.weights.sum() == pytest.approx(1.0, abs=1e-13)
        assert grid.weights @ (z[:, 0] ** 2 * z[:, 1] ** 2) == pytest.approx(1 / 9, abs=1e-13)
        assert grid.weights @ (z[:, 2] ** 6) == pytest.approx(1 / 7, abs=1e-13)

    def test_invalid(self):
        """Тест некорректных аргументов."""
        with pytest.raises(SparseGridError):
            smolyak(-1, 2)

    def test_read_only(self):
        """Тест неизменяемости узлов."""
        grid = smolyak(2, 2)
        with pytest.raises(ValueError):
            grid.weights[0] = 0.0


class TestTensorGrid:
    """Тесты для полной тензорной сетки."""

    @pytest.mark.parametrize("d, expected", [(5, 3125), (7, 78125), (11, 48828125)])
    def test_counts(self, d, expected):
        """Тест числа узлов без построения."""
        assert tensor_grid(d, 5).count == expected

    def test_budget(self):
        """Тест ограничения на материализацию."""
        with pytest.raises(GridBudgetError):
            tensor_grid(11, 5).materialize(budget=10000)

    def test_materialize(self):
        """Тест построения малой сетки."""
        grid = tensor_grid(2, 5).materialize()
        assert len(grid) == 25
        assert grid.weights.sum() == pytest.approx(1.0, abs=1e-14)

    def test_one_dimension(self):
        """Тест d = 1."""
        grid = tensor_grid(1, 9).materialize()
        rule = cc_rule(3)
        np.testing.assert_allclose(grid.points[:, 0], rule.nodes, atol=1e-15)


class TestMoments:
    """Тесты для моментов по квадратуре."""

    def test_constant(self):
        """Тест постоянной величины."""
        grid = smolyak(3, 2)
        mean, std = moments(np.full(len(grid), 2.5), grid)
        assert mean == pytest.approx(2.5, abs=1e-13)
        assert std == pytest.approx(0.0, abs=1e-6)

    def test_square(self):
        """Тест q = z^2 на одномерной сетке."""
        grid = smolyak(1, 2)
        mean, std = moments(grid.points[:, 0] ** 2, grid)
        assert abs(mean - 1 / 3) < 1e-12
        assert abs(std - np.sqrt(4 / 45)) < 1e-12

    def test_printed_form(self):
        """Тест формы без вычитания среднего."""
        grid = smolyak(1, 2)
        _, root = moments(grid.points[:, 0] ** 2, grid, printed_form=True)
        assert root == pytest.approx(np.sqrt(1 / 5), abs=1e-12)

    def test_odd(self):
        """Тест нечётной величины."""
        grid = smolyak(4, 3)
        mean, _ = moments(grid.points[:, 0], grid)
        assert abs(mean) < 1e-14

    def test_length_mismatch(self):
        """Тест несовпадения длины."""
        with pytest.raises(SparseGridError):
            moments([1.0, 2.0], smolyak(2, 1))


class TestParameterSpace:
    """Тесты для отображения на физические границы."""

    def test_to_physical(self):
        """Тест аффинного отображения."""
        space = ParameterSpace((ParameterDimension("a", 1.0, 3.0), ParameterDimension("b", -2.0, 0.0)))
        np.testing.assert_allclose(space.to_physical([-1.0, 1.0]), [1.0, 0.0])
        np.testing.assert_allclose(space.to_physical([0.0, 0.0]), [2.0, -1.0])
        assert space.labels == ["a", "b"]

    def test_invalid_bounds(self):
        """Тест вырожденных границ."""
        with pytest.raises(SparseGridError):
            ParameterSpace((ParameterDimension("a", 1.0, 1.0),))


class TestTable1:
    """Тесты для таблицы числа вычислений."""

    def test_rows(self):
        """Тест строк таблицы."""
        rows = table1_rows()
        assert [(r.dimension, r.sparse) for r in rows] == [(5, 241), (7, 589), (11, 2069), (15, 5021)]
        assert [r.full for r in rows[:3]] == [3125, 78125, 48828125]
        assert rows[3].full > 3e10

    def test_grid_csv(self, tmp_path):
        """Тест экспорта сетки."""
        grid = smolyak(2, 1)
        path = tmp_path / "grid.csv"
        write_grid_csv(grid, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "k,w,z1,z2"
        assert len(lines) == 1 + len(grid)
