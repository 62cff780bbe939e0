"""Sparse grids on Clenshaw-Curtis knots for stochastic collocation."""
import csv
import itertools
import logging
from collections import namedtuple
from dataclasses import dataclass
from math import comb

import numpy as np

from .const import *

_LOGGER = logging.getLogger(__name__)

# Одномерное правило, веса нормированы на равномерную плотность на [-1, 1]
Rule1D = namedtuple("Rule1D", ["level", "nodes", "weights"])

# Одна размерность пространства параметров
ParameterDimension = namedtuple("ParameterDimension", ["label", "lower", "upper"])

# Строка таблицы числа вычислений
Table1Row = namedtuple("Table1Row", ["dimension", "full", "sparse"])

GRID_KEY_DECIMALS = 13


def points_for_level(level):
    """m(0) = 1, m(l) = 2^l + 1"""
    if level < 0:
        raise SparseGridError(f"Level must be >= 0, got {level}")
    return 1 if level == 0 else 2 ** level + 1


def cc_nodes_weights(m):
    """Узлы и вероятностные веса Кленшоу-Кёртиса для m точек"""
    if m < 1:
        raise SparseGridError(f"A Clenshaw-Curtis rule needs at least one point, got {m}")
    if m == 1:
        return np.array([0.0]), np.array([1.0])
    n = m - 1
    j = np.arange(m)
    nodes = -np.cos(np.pi * j / n)
    # точная антисимметрия, центральный узел ровно 0
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = np.empty(m)
    for jj in range(m):
        total = 1.0
        for k in range(1, n // 2 + 1):
            b = 1.0 if 2 * k == n else 2.0
            total -= b / (4.0 * k * k - 1.0) * np.cos(2.0 * np.pi * jj * k / n)
        c = 1.0 if jj in (0, n) else 2.0
        weights[jj] = c * total / n
    weights = 0.5 * (weights + weights[::-1])
    return nodes, 0.5 * weights


def cc_rule(level):
    """Вложенное правило Кленшоу-Кёртиса уровня level"""
    nodes, weights = cc_nodes_weights(points_for_level(level))
    return Rule1D(level=level, nodes=nodes, weights=weights)


def _multi_indices(d, max_sum):
    """Все мультииндексы длины d с суммой не больше max_sum"""
    if d == 1:
        for i in range(max_sum + 1):
            yield (i,)
        return
    for i in range(max_sum + 1):
        for rest in _multi_indices(d - 1, max_sum - i):
            yield (i,) + rest


class SparseGrid:
    """Разреженная сетка Смоляка: узлы z_k в [-1, 1]^d и веса w_k"""

    def __init__(self, dimension, level, points, weights):
        self.dimension = dimension
        self.level = level
        self.points = np.asarray(points, dtype=float).reshape(len(weights), dimension)
        self.weights = np.asarray(weights, dtype=float)
        self.points.flags.writeable = False
        self.weights.flags.writeable = False

    def __len__(self):
        return len(self.weights)

    def __repr__(self):
        return f"SparseGrid(d={self.dimension}, level={self.level}, points={len(self)})"


def smolyak(d, level):
    """Комбинационная формула Смоляка на вложенных правилах Кленшоу-Кёртиса"""
    if d < 0 or level < 0:
        raise SparseGridError(f"Sparse grid needs d >= 0 and level >= 0, got d={d}, level={level}")
    if d == 0:
        return SparseGrid(0, level, np.zeros((1, 0)), np.array([1.0]))
    rules = [cc_rule(l) for l in range(level + 1)]
    merged = {}
    order = []
    for index in _multi_indices(d, level):
        total = sum(index)
        if total < level - d + 1:
            continue
        coefficient = (-1) ** (level - total) * comb(d - 1, level - total)
        if coefficient == 0:
            continue
        per_dim = [list(zip(rules[i].nodes, rules[i].weights)) for i in index]
        for combo in itertools.product(*per_dim):
            z = tuple(c[0] for c in combo)
            w = coefficient * np.prod([c[1] for c in combo])
            key = tuple(np.round(z, GRID_KEY_DECIMALS) + 0.0)
            if key not in merged:
                merged[key] = [z, 0.0]
                order.append(key)
            merged[key][1] += w
    points = np.array([merged[k][0] for k in order])
    weights = np.array([merged[k][1] for k in order])
    _LOGGER.debug(f"🧮 SparseGrid: d={d}, level={level}, {len(weights)} points")
    return SparseGrid(d, level, points, weights)


def smolyak_level3_count(d):
    """Число узлов сетки уровня 3 в замкнутой форме"""
    return (4 * d ** 3 + 6 * d ** 2 + 14 * d + 3) // 3


class TensorGrid:
    """Полная тензорная сетка; узлы перечисляются лениво"""

    def __init__(self, dimension, points_per_dim):
        if dimension < 1:
            raise SparseGridError(f"Tensor grid needs d >= 1, got {dimension}")
        self.dimension = dimension
        self.points_per_dim = points_per_dim
        self.nodes, self.weights_1d = cc_nodes_weights(points_per_dim)

    @property
    def count(self):
        return self.points_per_dim ** self.dimension

    def __len__(self):
        return self.count

    def __iter__(self):
        """Пары (z, w) без материализации всей сетки"""
        pairs = list(zip(self.nodes, self.weights_1d))
        for combo in itertools.product(pairs, repeat=self.dimension):
            yield np.array([c[0] for c in combo]), float(np.prod([c[1] for c in combo]))

    def materialize(self, budget=DEFAULT_GRID_BUDGET):
        """Все узлы и веса; ошибка, если сетка больше бюджета"""
        if self.count > budget:
            _LOGGER.error(f"❌ SparseGrid: tensor grid with {self.count} points exceeds budget {budget}")
            raise GridBudgetError(f"Tensor grid has {self.count} points, budget is {budget}")
        pairs = list(self)
        points = np.array([p[0] for p in pairs])
        weights = np.array([p[1] for p in pairs])
        return SparseGrid(self.dimension, None, points, weights)


def tensor_grid(d, points_per_dim):
    return TensorGrid(d, points_per_dim)


def moments(values, grid, printed_form=False):
    """Среднее и стандартное отклонение по квадратуре сетки.

    printed_form=True возвращает sqrt(sum w q^2) без вычитания квадрата среднего.
    """
    q = np.asarray(values, dtype=float)
    if q.shape[0] != len(grid.weights):
        _LOGGER.error(f"❌ SparseGrid: {q.shape[0]} values for {len(grid.weights)} nodes")
        raise SparseGridError(f"Got {q.shape[0]} values for a grid with {len(grid.weights)} points")
    mean = float(grid.weights @ q)
    second = float(grid.weights @ (q * q))
    if printed_form:
        return mean, float(np.sqrt(max(0.0, second)))
    variance = second - mean * mean
    if variance < 0:
        _LOGGER.debug(f"SparseGrid: clamped negative variance {variance:.3e}")
        variance = 0.0
    return mean, float(np.sqrt(variance))


@dataclass(frozen=True)
class ParameterSpace:
    """Физические границы и метки случайных параметров"""

    dimensions: tuple

    def __post_init__(self):
        for dim in self.dimensions:
            if not dim.lower < dim.upper:
                raise SparseGridError(f"Dimension '{dim.label}' needs lower < upper, got {dim.lower}, {dim.upper}")

    def __len__(self):
        return len(self.dimensions)

    @property
    def labels(self):
        return [dim.label for dim in self.dimensions]

    @property
    def lower(self):
        return np.array([dim.lower for dim in self.dimensions])

    @property
    def upper(self):
        return np.array([dim.upper for dim in self.dimensions])

    def to_physical(self, z):
        """Аффинное отображение [-1, 1]^d на границы параметров"""
        z = np.asarray(z, dtype=float)
        return self.lower + 0.5 * (z + 1.0) * (self.upper - self.lower)


def table1_rows(dimensions=TABLE1_DIMENSIONS, level=DEFAULT_SG_LEVEL, points_per_dim=TABLE1_POINTS_PER_DIM):
    """Число вычислений PDE для полной и разреженной сетки"""
    rows = []
    for d in dimensions:
        full = tensor_grid(d, points_per_dim).count
        sparse = len(smolyak(d, level))
        rows.append(Table1Row(dimension=d, full=full, sparse=sparse))
        _LOGGER.info(f"📋 Grid counts: d={d}, full={full}, sparse={sparse}")
    return rows


def write_grid_csv(grid, path):
    """Экспорт сетки: k,w,z1,...,zd"""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "w"] + [f"z{i + 1}" for i in range(grid.dimension)])
        for k, (z, w) in enumerate(zip(grid.points, grid.weights)):
            writer.writerow([k, FLOAT_FORMAT.format(w)] + [FLOAT_FORMAT.format(v) for v in z])


class SparseGridError(Exception):
    """Ошибка построения сетки или расчёта моментов"""
    pass


class GridBudgetError(SparseGridError):
    """Сетка превышает допустимое число узлов"""
    pass
