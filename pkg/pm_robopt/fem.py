"""Linear magnetostatic FEM on one unrolled machine pole.

The pole is a rectangle x in [0, tau], y in [0, stator yoke], with y measured
from the shaft. Stator and shaft edges carry homogeneous Dirichlet values, the
left and right edges are coupled antiperiodically. The buried magnet sits in
a window of 3x3 blocks; the four inner window vertices are the magnet corners,
so every block deforms affinely (two macro triangles per block) and the
stiffness matrix splits into p-independent terms times closed-form weights.
"""
import csv
import logging
import os
from collections import namedtuple
from dataclasses import dataclass, field, replace
from functools import cached_property
from math import ceil, pi

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .const import *

_LOGGER = logging.getLogger(__name__)

# Обмотка: по одному элементу на паз
Winding = namedtuple("Winding", ["phases", "signs", "turns", "axes", "d_axis", "n_poles", "length"])

# Опорное положение окна деформации (м): вертикали и горизонтали сетки 4x4
WindowLayout = namedtuple("WindowLayout", ["xs", "ys", "x_center", "y_rotor", "p_ref"])

# Предельные размеры магнита в окне (мм)
FitLimits = namedtuple("FitLimits", ["p1_max", "p3_min", "p23_max"])

FieldSolution = namedtuple("FieldSolution", ["u", "residual"])

# Блоки окна, разбитые по диагонали UL-LR (подвижная вершина лежит на ней)
ANTI_DIAGONAL_BLOCKS = ((2, 0), (0, 2))
PM_BLOCK = (1, 1)
BARRIER_BLOCKS = ((0, 1), (2, 1), (0, 2), (2, 2))

N_MACRO = 18
ADMISSIBLE_TOL = 1e-9  # мм


def _window_vertex(i, j):
    return 4 * j + i


def _macro_triangles():
    """Вершины (индексы сетки 4x4) для 18 макротреугольников окна"""
    triangles = []
    for r in range(3):
        for c in range(3):
            v00, v10 = _window_vertex(c, r), _window_vertex(c + 1, r)
            v01, v11 = _window_vertex(c, r + 1), _window_vertex(c + 1, r + 1)
            if (c, r) in ANTI_DIAGONAL_BLOCKS:
                triangles += [(v00, v10, v01), (v10, v11, v01)]
            else:
                triangles += [(v00, v10, v11), (v00, v11, v01)]
    return tuple(triangles)


MACRO_TRIANGLES = _macro_triangles()
PM_MACROS = (2 * (PM_BLOCK[1] * 3 + PM_BLOCK[0]), 2 * (PM_BLOCK[1] * 3 + PM_BLOCK[0]) + 1)


@dataclass(frozen=True)
class PoleGeometry:
    """Геометрия полюса (м), параметры магнита p в мм"""

    shaft_radius: float = DEFAULT_SHAFT_RADIUS
    rotor_radius: float = DEFAULT_ROTOR_RADIUS
    air_gap: float = DEFAULT_AIR_GAP
    slot_depth: float = DEFAULT_SLOT_DEPTH
    stator_outer_radius: float = DEFAULT_STATOR_OUTER_RADIUS
    npp: int = DEFAULT_NPP
    slot_fill: float = DEFAULT_SLOT_FILL
    length: float = DEFAULT_LENGTH
    turns: int = DEFAULT_TURNS
    slot_layout: tuple = DEFAULT_SLOT_LAYOUT
    window_half_width: float = DEFAULT_WINDOW_HALF_WIDTH
    window_bottom: float = DEFAULT_WINDOW_BOTTOM
    window_top_bridge: float = DEFAULT_WINDOW_TOP_BRIDGE
    fit_margin: float = DEFAULT_FIT_MARGIN
    mesh_step: float = DEFAULT_MESH_STEP
    block_cells: int = DEFAULT_BLOCK_CELLS
    p: tuple = DEFAULT_P

    def __post_init__(self):
        radii = (self.shaft_radius, self.rotor_radius, self.stator_inner_radius,
                 self.stator_inner_radius + self.slot_depth, self.stator_outer_radius)
        if self.shaft_radius <= 0 or any(b <= a for a, b in zip(radii, radii[1:])):
            _LOGGER.error(f"❌ FEM: radii not increasing: {radii}")
            raise GeometryError(f"Radii must increase strictly from the shaft outward, got {radii}")
        if self.npp < 1 or self.turns < 1:
            raise GeometryError(f"npp and turns must be >= 1, got npp={self.npp}, turns={self.turns}")
        if not 0 < self.slot_fill < 1:
            raise GeometryError(f"slot_fill must lie in (0, 1), got {self.slot_fill}")
        for phase, sign in self.slot_layout:
            if phase not in PHASES or sign not in (1, -1):
                raise GeometryError(f"Bad slot layout entry ({phase}, {sign})")
        if self.window_bottom <= 0 or self.window_top_bridge <= 0 or self.window_half_width <= 0:
            raise GeometryError("Window dimensions must be positive")
        if self.x_center - self.window_half_width <= 0 or self.x_center + self.window_half_width >= self.pole_pitch:
            raise GeometryError(f"Window half width {self.window_half_width} does not fit the pole pitch {self.pole_pitch}")
        if self.y_rotor - self.window_top_bridge <= self.window_bottom:
            raise GeometryError("Window bottom lies above the window top")
        check_admissible(self, self.p)
        check_admissible(self, self.reference_p)

    @property
    def n_poles(self):
        return 2 * self.npp

    @property
    def stator_inner_radius(self):
        return self.rotor_radius + self.air_gap

    @property
    def pole_pitch(self):
        """Полюсное деление по середине зазора"""
        return pi * (self.rotor_radius + 0.5 * self.air_gap) / self.npp

    @property
    def x_center(self):
        return 0.5 * self.pole_pitch

    @property
    def y_rotor(self):
        return self.rotor_radius - self.shaft_radius

    @property
    def y_gap(self):
        return self.stator_inner_radius - self.shaft_radius

    @property
    def y_slot(self):
        return self.y_gap + self.slot_depth

    @property
    def y_outer(self):
        return self.stator_outer_radius - self.shaft_radius

    @property
    def slot_pitch(self):
        return self.pole_pitch / len(self.slot_layout)

    @property
    def slot_width(self):
        return self.slot_fill * self.slot_pitch

    @property
    def slot_ranges(self):
        """(x_lo, x_hi) каждого паза"""
        half = 0.5 * self.slot_width
        return tuple(((k + 0.5) * self.slot_pitch - half, (k + 0.5) * self.slot_pitch + half)
                     for k in range(len(self.slot_layout)))

    @property
    def reference_p(self):
        """Опорный магнит сетки: ширина равна раскрытию центрального паза"""
        return (self.slot_width * 1e3, self.p[1], self.p[2])

    @property
    def fit_limits(self):
        m = self.fit_margin
        return FitLimits(
            p1_max=2e3 * self.window_half_width - 2.0 * m,
            p3_min=1e3 * self.window_top_bridge + m,
            p23_max=1e3 * (self.y_rotor - self.window_bottom) - m,
        )


@dataclass(frozen=True)
class Materials:
    """Магнитное сопротивление по областям, поле магнита и плотности тока пазов"""

    nu: dict
    h_pm: tuple = (0.0, 0.0)
    j_src: tuple = ()

    def __post_init__(self):
        for region, value in self.nu.items():
            if not value > 0:
                _LOGGER.error(f"❌ FEM: reluctivity of '{region}' is {value}")
                raise FemError(f"Reluctivity must be positive everywhere, '{region}' has {value}")

    def with_sources(self, h_pm=None, j_src=None):
        """Копия с другими источниками"""
        return replace(
            self,
            h_pm=self.h_pm if h_pm is None else tuple(float(v) for v in h_pm),
            j_src=self.j_src if j_src is None else tuple(float(v) for v in j_src),
        )

    @property
    def pm_off(self):
        return self.with_sources(h_pm=(0.0, 0.0))


def default_geometry(**overrides):
    """Шаблон 6-полюсной машины, S0 = p1*p2 = 133 мм^2"""
    return PoleGeometry(**overrides)


def default_materials(n_slots=len(DEFAULT_SLOT_LAYOUT), mu_iron=DEFAULT_MU_IRON, mu_pm=DEFAULT_MU_PM, br=DEFAULT_BR):
    """Линейные материалы: намагниченность магнита по +y"""
    nu_pm = NU0 / mu_pm
    nu = {
        REGION_ROTOR: NU0 / mu_iron,
        REGION_STATOR: NU0 / mu_iron,
        REGION_AIR: NU0,
        REGION_BARRIER: NU0,
        REGION_SLOT: NU0,
        REGION_PM: nu_pm,
    }
    return Materials(nu=nu, h_pm=(0.0, nu_pm * br), j_src=(0.0,) * n_slots)


def check_admissible(geom, p):
    """Проверка, что магнит p (мм) помещается в окно с запасом fit_margin"""
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise GeometryError(f"PM parameters must be three finite numbers, got {p.tolist()}")
    limits = geom.fit_limits
    problems = []
    if np.any(p <= 0):
        problems.append("all of p1, p2, p3 must be positive")
    if p[0] > limits.p1_max + ADMISSIBLE_TOL:
        problems.append(f"p1={p[0]:.6g} exceeds {limits.p1_max:.6g}")
    if p[2] < limits.p3_min - ADMISSIBLE_TOL:
        problems.append(f"p3={p[2]:.6g} below {limits.p3_min:.6g}")
    if p[1] + p[2] > limits.p23_max + ADMISSIBLE_TOL:
        problems.append(f"p2+p3={p[1] + p[2]:.6g} exceeds {limits.p23_max:.6g}")
    if problems:
        _LOGGER.error(f"❌ FEM: inadmissible PM geometry {p.tolist()}: {'; '.join(problems)}")
        raise GeometryError(f"Inadmissible PM geometry {p.tolist()}: {'; '.join(problems)}")


def is_admissible(geom, p):
    try:
        check_admissible(geom, p)
    except GeometryError:
        return False
    return True


def _pm_lines(x_center, y_rotor, p):
    """Вертикали c1, c2 и горизонтали r1, r2 магнита (м)"""
    c1 = x_center - 0.5e-3 * p[0]
    c2 = x_center + 0.5e-3 * p[0]
    r2 = y_rotor - 1e-3 * p[2]
    r1 = r2 - 1e-3 * p[1]
    return c1, c2, r1, r2


class Mesh:
    """Треугольная сетка с тегами областей, пазов, блоков и границ"""

    def __init__(self, nodes, triangles, regions, slots, blocks, node_tags, winding,
                 geom=None, level=0, window=None, coupled=True):
        self.nodes = np.asarray(nodes, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.regions = np.asarray(regions, dtype="<U8")
        self.slots = np.asarray(slots, dtype=np.int64)
        self.blocks = np.asarray(blocks, dtype=np.int64)
        self.node_tags = np.asarray(node_tags, dtype="<U8")
        self.winding = winding
        self.geom = geom
        self.level = level
        self.window = window
        self.coupled = coupled
        for array in (self.nodes, self.triangles, self.regions, self.slots, self.blocks, self.node_tags):
            array.flags.writeable = False

        areas, _ = element_geometry(self.nodes, self.triangles)
        if np.any(areas <= 0):
            bad = np.flatnonzero(areas <= 0)[:5].tolist()
            raise FemError(f"Triangles {bad} are not positively oriented")
        n_slots = len(winding.phases)
        loads = np.zeros((n_slots, self.n_nodes))
        slot_areas = np.zeros(n_slots)
        for s in range(n_slots):
            mask = self.slots == s
            slot_areas[s] = areas[mask].sum()
            loads[s] = np.bincount(self.triangles[mask].ravel(), weights=np.repeat(areas[mask] / 3.0, 3),
                                   minlength=self.n_nodes)
        if np.any(slot_areas <= 0):
            raise FemError("Every slot of the winding must contain triangles")
        self.slot_areas = slot_areas
        self.slot_loads = loads
        self.slot_areas.flags.writeable = False
        self.slot_loads.flags.writeable = False

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def __repr__(self):
        return f"Mesh(level={self.level}, nodes={self.n_nodes}, triangles={self.n_triangles})"


def element_geometry(nodes, triangles):
    """Площади и градиенты линейных базисных функций для всех треугольников"""
    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    grads = np.empty((len(triangles), 3, 2))
    grads[:, 0, 0] = p1[:, 1] - p2[:, 1]
    grads[:, 0, 1] = p2[:, 0] - p1[:, 0]
    grads[:, 1, 0] = p2[:, 1] - p0[:, 1]
    grads[:, 1, 1] = p0[:, 0] - p2[:, 0]
    grads[:, 2, 0] = p0[:, 1] - p1[:, 1]
    grads[:, 2, 1] = p1[:, 0] - p0[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        grads /= det[:, None, None]
    return 0.5 * det, grads


def _axis(breaks, forced, step, level):
    """Узлы вдоль оси и индексы узлов на точках излома"""
    coords = [breaks[0]]
    offsets = [0]
    for k in range(len(breaks) - 1):
        a, b = breaks[k], breaks[k + 1]
        n = forced[k] if k in forced else max(1, ceil((b - a) / step - 1e-9)) * 2 ** level
        coords.extend(a + (b - a) * np.arange(1, n) / n)
        coords.append(b)
        offsets.append(offsets[-1] + n)
    return np.array(coords), offsets


def _merge_breaks(fixed, extra, tol=1e-9):
    """Точки излома: fixed сохраняются точно, близкие к ним extra отбрасываются"""
    breaks = list(fixed)
    for value in extra:
        if all(abs(value - b) > tol for b in breaks):
            breaks.append(value)
    return sorted(breaks)


def build_reference_mesh(geom, refinement=DEFAULT_REFINEMENT):
    """Структурированная сетка полюса; окно магнита из 3x3 блоков по n x n ячеек"""
    if refinement < 0:
        raise GeometryError(f"Refinement level must be >= 0, got {refinement}")
    tau = geom.pole_pitch
    xc, y_ro = geom.x_center, geom.y_rotor
    p_ref = geom.reference_p
    c1, c2, r1, r2 = _pm_lines(xc, y_ro, p_ref)
    x_a, x_b = xc - geom.window_half_width, xc + geom.window_half_width
    y_a, y_b = geom.window_bottom, y_ro - geom.window_top_bridge
    window = WindowLayout(xs=(x_a, c1, c2, x_b), ys=(y_a, r1, r2, y_b), x_center=xc, y_rotor=y_ro, p_ref=p_ref)

    slot_edges = [edge for rng in geom.slot_ranges for edge in rng]
    xb = _merge_breaks((0.0, x_a, c1, c2, x_b, tau), slot_edges)
    yb = _merge_breaks((0.0, y_a, r1, r2, y_b, y_ro, geom.y_gap, geom.y_slot, geom.y_outer), ())
    ix = xb.index(x_a)
    iy = yb.index(y_a)
    if xb[ix:ix + 4] != [x_a, c1, c2, x_b]:
        _LOGGER.error(f"❌ FEM: slot openings cut the PM window: {xb}")
        raise GeometryError("Slot openings must not cut the PM window; adjust window_half_width or slot_fill")
    n_block = geom.block_cells * 2 ** refinement
    xs, x_off = _axis(xb, {ix: n_block, ix + 1: n_block, ix + 2: n_block}, geom.mesh_step, refinement)
    ys, y_off = _axis(yb, {iy: n_block, iy + 1: n_block, iy + 2: n_block}, geom.mesh_step, refinement)
    nx, ny = len(xs), len(ys)
    win_i0, win_j0 = x_off[ix], y_off[iy]

    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    tags = np.full(nx * ny, "", dtype="<U8")
    node_id = lambda i, j: j * nx + i
    for j in range(ny):
        tags[node_id(0, j)] = BOUNDARY_LEFT
        tags[node_id(nx - 1, j)] = BOUNDARY_RIGHT
    for i in range(nx):
        tags[node_id(i, 0)] = BOUNDARY_SHAFT
        tags[node_id(i, ny - 1)] = BOUNDARY_STATOR

    triangles, regions, slots, blocks = [], [], [], []
    for j in range(ny - 1):
        for i in range(nx - 1):
            xm = 0.5 * (xs[i] + xs[i + 1])
            ym = 0.5 * (ys[j] + ys[j + 1])
            ll, lr = node_id(i, j), node_id(i + 1, j)
            ul, ur = node_id(i, j + 1), node_id(i + 1, j + 1)
            bi, bj = i - win_i0, j - win_j0
            in_window = 0 <= bi < 3 * n_block and 0 <= bj < 3 * n_block
            block = (bi // n_block, bj // n_block) if in_window else None
            region, slot = _cell_region(geom, window, xm, ym, block)
            if block in ANTI_DIAGONAL_BLOCKS:
                cell = ((ll, lr, ul), (lr, ur, ul))
            else:
                cell = ((ll, lr, ur), (ll, ur, ul))
            for tri in cell:
                triangles.append(tri)
                regions.append(region)
                slots.append(slot)
                blocks.append(_macro_index(window, block, nodes[list(tri)]) if block else -1)

    winding = _pole_winding(geom)
    mesh = Mesh(nodes, triangles, regions, slots, blocks, tags, winding,
                geom=geom, level=refinement, window=window, coupled=True)
    _LOGGER.info(f"🔧 FEM: reference mesh level {refinement}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")
    return mesh


def _cell_region(geom, window, xm, ym, block):
    """Тег области и индекс паза ячейки по её центру"""
    x_a, c1, c2, x_b = window.xs
    y_b = window.ys[3]
    if block is not None:
        if block == PM_BLOCK:
            return REGION_PM, -1
        if block in BARRIER_BLOCKS:
            return REGION_BARRIER, -1
        return REGION_ROTOR, -1
    if ym < geom.y_rotor:
        # каналы над барьерами выходят на поверхность ротора
        if ym > y_b and (x_a < xm < c1 or c2 < xm < x_b):
            return REGION_BARRIER, -1
        return REGION_ROTOR, -1
    if ym < geom.y_gap:
        return REGION_AIR, -1
    if ym < geom.y_slot:
        for s, (lo, hi) in enumerate(geom.slot_ranges):
            if lo < xm < hi:
                return REGION_SLOT, s
    return REGION_STATOR, -1


def _macro_index(window, block, corners):
    """Номер макротреугольника по центру треугольника в локальных координатах блока"""
    c, r = block
    centroid = corners.mean(axis=0)
    xi = (centroid[0] - window.xs[c]) / (window.xs[c + 1] - window.xs[c])
    eta = (centroid[1] - window.ys[r]) / (window.ys[r + 1] - window.ys[r])
    if block in ANTI_DIAGONAL_BLOCKS:
        k = 0 if xi + eta < 1.0 else 1
    else:
        k = 0 if xi > eta else 1
    return 2 * (r * 3 + c) + k


def _pole_winding(geom):
    """Оси фаз: сторона «туда» паза плюс pi/2 в электрических радианах"""
    axes = {}
    for k, (phase, sign) in enumerate(geom.slot_layout):
        theta = pi * (k + 0.5) * geom.slot_pitch / geom.pole_pitch
        go = theta if sign > 0 else theta + pi
        axes.setdefault(phase, (go + 0.5 * pi) % (2 * pi))
    return Winding(
        phases=tuple(phase for phase, _ in geom.slot_layout),
        signs=tuple(sign for _, sign in geom.slot_layout),
        turns=geom.turns,
        axes=axes,
        d_axis=pi * geom.x_center / geom.pole_pitch,
        n_poles=geom.n_poles,
        length=geom.length,
    )


def build_slab_mesh(layers, width=0.01, refinement=0, step=0.001):
    """Поверочная сетка: горизонтальные слои (толщина, область) с Дирихле сверху и снизу.

    Слои с тегом slot становятся катушками одной фазы u.
    """
    if not layers:
        raise GeometryError("Slab needs at least one layer")
    yb = [0.0]
    for thickness, _ in layers:
        if thickness <= 0:
            raise GeometryError(f"Layer thickness must be positive, got {thickness}")
        yb.append(yb[-1] + thickness)
    xs, _ = _axis([0.0, width], {}, step, refinement)
    ys, y_off = _axis(yb, {}, step, refinement)
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    tags = np.full(nx * ny, "", dtype="<U8")
    tags[0::nx] = BOUNDARY_LEFT
    tags[nx - 1::nx] = BOUNDARY_RIGHT
    tags[:nx] = BOUNDARY_SHAFT
    tags[-nx:] = BOUNDARY_STATOR

    coil_of_layer = {}
    for k, (_, region) in enumerate(layers):
        if region == REGION_SLOT:
            coil_of_layer[k] = len(coil_of_layer)
    triangles, regions, slots = [], [], []
    for k, (_, region) in enumerate(layers):
        for j in range(y_off[k], y_off[k + 1]):
            for i in range(nx - 1):
                ll, lr = j * nx + i, j * nx + i + 1
                ul, ur = ll + nx, lr + nx
                for tri in ((ll, lr, ur), (ll, ur, ul)):
                    triangles.append(tri)
                    regions.append(region)
                    slots.append(coil_of_layer.get(k, -1))
    n_coils = len(coil_of_layer)
    winding = Winding(phases=("u",) * n_coils, signs=(1,) * n_coils, turns=1,
                      axes={"u": 0.0}, d_axis=0.0, n_poles=1, length=1.0)
    return Mesh(nodes, triangles, regions, slots, [-1] * len(triangles), tags, winding,
                geom=None, level=refinement, window=None, coupled=False)


def window_vertices(mesh, p):
    """16 вершин окна для магнита p: внешние на месте, внутренние в углах магнита"""
    window = mesh.window
    c1, c2, r1, r2 = _pm_lines(window.x_center, window.y_rotor, p)
    xs_new = (window.xs[0], c1, c2, window.xs[3])
    ys_new = (window.ys[0], r1, r2, window.ys[3])
    vertices = np.empty((16, 2))
    for j in range(4):
        for i in range(4):
            inner = i in (1, 2) and j in (1, 2)
            vertices[_window_vertex(i, j)] = (xs_new[i] if inner else window.xs[i],
                                              ys_new[j] if inner else window.ys[j])
    return vertices


def macro_maps(mesh, p):
    """Аффинные отображения x -> Q0 + B (x - P0) для 18 макротреугольников"""
    reference = window_vertices(mesh, mesh.window.p_ref)
    mapped = window_vertices(mesh, p)
    B = np.empty((N_MACRO, 2, 2))
    origins = np.empty((N_MACRO, 2, 2))
    for q, (a, b, c) in enumerate(MACRO_TRIANGLES):
        E_ref = np.column_stack([reference[b] - reference[a], reference[c] - reference[a]])
        E_map = np.column_stack([mapped[b] - mapped[a], mapped[c] - mapped[a]])
        B[q] = np.linalg.solve(E_ref.T, E_map.T).T
        origins[q] = (reference[a], mapped[a])
    return B, origins


def mapped_nodes(mesh, p):
    """Узлы сетки, деформированной под магнит p; узлы вне окна не двигаются"""
    if mesh.window is None:
        return mesh.nodes.copy()
    check_admissible(mesh.geom, p)
    B, origins = macro_maps(mesh, p)
    nodes = mesh.nodes.copy()
    x_a, _, _, x_b = mesh.window.xs
    y_a, _, _, y_b = mesh.window.ys
    tol = 1e-12
    inside = ((mesh.nodes[:, 0] > x_a + tol) & (mesh.nodes[:, 0] < x_b - tol)
              & (mesh.nodes[:, 1] > y_a + tol) & (mesh.nodes[:, 1] < y_b - tol))
    for q in range(N_MACRO):
        ids = np.unique(mesh.triangles[mesh.blocks == q])
        ids = ids[inside[ids]]
        P0, Q0 = origins[q]
        nodes[ids] = Q0 + (mesh.nodes[ids] - P0) @ B[q].T
    return nodes


def _element_nu(mesh, materials):
    nu = np.empty(mesh.n_triangles)
    for region in np.unique(mesh.regions):
        if region not in materials.nu:
            raise FemError(f"No reluctivity given for region '{region}'")
        nu[mesh.regions == region] = materials.nu[region]
    return nu


def _source_vector(mesh, materials):
    """Вклад токов пазов в правую часть (не зависит от p)"""
    j_src = np.asarray(materials.j_src, dtype=float)
    if len(j_src) == 0:
        return np.zeros(mesh.n_nodes)
    if len(j_src) != len(mesh.slot_areas):
        raise FemError(f"Got {len(j_src)} slot current densities for {len(mesh.slot_areas)} slots")
    return j_src @ mesh.slot_loads


def assemble_direct(mesh, p, materials):
    """Прямая сборка K и правой части по элементам деформированной сетки"""
    nodes = mapped_nodes(mesh, p)
    areas, grads = element_geometry(nodes, mesh.triangles)
    if np.any(areas <= 0):
        raise GeometryError(f"Mapped mesh for p={list(p)} has inverted triangles")
    w = _element_nu(mesh, materials) * areas
    ke = w[:, None, None] * np.einsum("tak,tbk->tab", grads, grads)
    rows = np.broadcast_to(mesh.triangles[:, :, None], ke.shape).ravel()
    cols = np.broadcast_to(mesh.triangles[:, None, :], ke.shape).ravel()
    K = sparse.coo_matrix((ke.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()

    rhs = _source_vector(mesh, materials)
    hx, hy = materials.h_pm
    pm = mesh.regions == REGION_PM
    if np.any(pm) and (hx or hy):
        values = areas[pm, None] * (hx * grads[pm, :, 1] - hy * grads[pm, :, 0])
        rhs = rhs + np.bincount(mesh.triangles[pm].ravel(), weights=values.ravel(), minlength=mesh.n_nodes)
    return K, rhs


class AffineSystem:
    """Предвычисленные слагаемые K = sum theta_q(p) K_q на общем шаблоне разреженности.

    Слагаемое 0 собирает неподвижную часть; каждый макротреугольник даёт три
    слагаемых (xx, xy+yx, yy) с весами из G = det(B) B^-1 B^-T.
    """

    def __init__(self, mesh, materials):
        if mesh.window is None:
            raise FemError("Affine decomposition needs a mesh with a deformation window")
        self.mesh = mesh
        self.geom = mesh.geom
        self.materials = materials
        n = mesh.n_nodes
        areas, grads = element_geometry(mesh.nodes, mesh.triangles)
        w = _element_nu(mesh, materials) * areas
        gx, gy = grads[:, :, 0], grads[:, :, 1]
        outer = lambda a, b: a[:, :, None] * b[:, None, :]
        blocks = mesh.blocks

        fixed = blocks < 0
        terms = [(0, fixed, w[:, None, None] * np.einsum("tak,tbk->tab", grads, grads))]
        xx = w[:, None, None] * outer(gx, gx)
        xy = w[:, None, None] * (outer(gx, gy) + outer(gy, gx))
        yy = w[:, None, None] * outer(gy, gy)
        for q in range(N_MACRO):
            mask = blocks == q
            terms += [(1 + 3 * q, mask, xx), (2 + 3 * q, mask, xy), (3 + 3 * q, mask, yy)]

        rows, cols, ids, values = [], [], [], []
        for term, mask, ke in terms:
            tri = mesh.triangles[mask]
            rows.append(np.broadcast_to(tri[:, :, None], (len(tri), 3, 3)).ravel())
            cols.append(np.broadcast_to(tri[:, None, :], (len(tri), 3, 3)).ravel())
            values.append(ke[mask].ravel())
            ids.append(np.full(9 * len(tri), term))
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        keys, position = np.unique(rows * n + cols, return_inverse=True)
        self.n_terms = 1 + 3 * N_MACRO
        self.indices = (keys % n).astype(np.int64)
        self.indptr = np.searchsorted(keys // n, np.arange(n + 1)).astype(np.int64)
        self.term_data = sparse.coo_matrix(
            (np.concatenate(values), (np.concatenate(ids), position.ravel())),
            shape=(self.n_terms, len(keys)),
        ).tocsr()

        # правая часть магнита: интегралы градиентов в опорных координатах
        self.pm_x = np.zeros((len(PM_MACROS), n))
        self.pm_y = np.zeros((len(PM_MACROS), n))
        for k, q in enumerate(PM_MACROS):
            mask = (blocks == q) & (mesh.regions == REGION_PM)
            tri = mesh.triangles[mask].ravel()
            self.pm_x[k] = np.bincount(tri, weights=(areas[mask, None] * gx[mask]).ravel(), minlength=n)
            self.pm_y[k] = np.bincount(tri, weights=(areas[mask, None] * gy[mask]).ravel(), minlength=n)
        for array in (self.indices, self.indptr, self.pm_x, self.pm_y):
            array.flags.writeable = False

    def theta(self, p):
        """Веса слагаемых матрицы жёсткости"""
        B, _ = macro_maps(self.mesh, p)
        adj = np.empty_like(B)
        adj[:, 0, 0], adj[:, 0, 1] = B[:, 1, 1], -B[:, 0, 1]
        adj[:, 1, 0], adj[:, 1, 1] = -B[:, 1, 0], B[:, 0, 0]
        det = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
        G = np.einsum("qij,qkj->qik", adj, adj) / det[:, None, None]
        weights = np.empty(self.n_terms)
        weights[0] = 1.0
        weights[1::3] = G[:, 0, 0]
        weights[2::3] = G[:, 0, 1]
        weights[3::3] = G[:, 1, 1]
        return weights, B

    def rho(self, B, h_pm):
        """Веса векторов магнита: элементы матрицы алгебраических дополнений B"""
        hx, hy = h_pm
        weights = []
        for q in PM_MACROS:
            cof = np.array([[B[q, 1, 1], -B[q, 1, 0]], [-B[q, 0, 1], B[q, 0, 0]]])
            weights.append((hx * cof[1, 0] - hy * cof[0, 0], hx * cof[1, 1] - hy * cof[0, 1]))
        return np.array(weights)

    @property
    def term_count(self):
        return self.n_terms


def precompute_affine(mesh, geom=None, materials=None):
    """Однократная сборка слагаемых на опорной сетке"""
    if geom is not None and mesh.geom is not None and geom != mesh.geom:
        raise FemError("Geometry does not match the one the mesh was built from")
    materials = materials or default_materials(len(mesh.slot_areas))
    system = AffineSystem(mesh, materials)
    _LOGGER.info(f"🔧 FEM: assembled {system.n_terms} affine terms, {len(system.indices)} nonzeros")
    return system


def assemble_affine(system, p, materials=None):
    """K = sum theta_q(p) K_q, rhs = j_src + sum rho_r(p) j_r без обхода элементов.

    Магнитные сопротивления зафиксированы при предвычислении; из materials
    берутся только источники.
    """
    check_admissible(system.geom, p)
    materials = materials or system.materials
    theta, B = system.theta(p)
    mesh = system.mesh
    K = sparse.csr_matrix((system.term_data.T @ theta, system.indices, system.indptr),
                          shape=(mesh.n_nodes, mesh.n_nodes))
    rhs = _source_vector(mesh, materials)
    if any(materials.h_pm):
        rho = system.rho(B, materials.h_pm)
        rhs = rhs + rho[:, 0] @ system.pm_x + rho[:, 1] @ system.pm_y
    return K, rhs


@dataclass(frozen=True, eq=False)
class BoundaryConditions:
    """Узлы Дирихле и антипериодические пары u_right = -u_left"""

    n_nodes: int
    dirichlet: np.ndarray
    left: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    right: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @cached_property
    def reduction(self):
        """Матрица P: u = P u_free"""
        n = self.n_nodes
        eliminated = np.zeros(n, dtype=bool)
        eliminated[self.dirichlet] = True
        eliminated[self.right] = True
        free = np.flatnonzero(~eliminated)
        column = np.full(n, -1)
        column[free] = np.arange(len(free))
        rows = np.concatenate([free, self.right])
        cols = np.concatenate([column[free], column[self.left]])
        vals = np.concatenate([np.ones(len(free)), -np.ones(len(self.right))])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, len(free)))


def boundary_conditions(mesh):
    """Дирихле на статоре и валу, антипериодичность слева-справа для полюса"""
    tags = mesh.node_tags
    dirichlet = np.flatnonzero((tags == BOUNDARY_STATOR) | (tags == BOUNDARY_SHAFT))
    if not mesh.coupled:
        return BoundaryConditions(mesh.n_nodes, dirichlet)
    left = np.flatnonzero(tags == BOUNDARY_LEFT)
    right = np.flatnonzero(tags == BOUNDARY_RIGHT)
    left = left[np.argsort(mesh.nodes[left, 1], kind="stable")]
    right = right[np.argsort(mesh.nodes[right, 1], kind="stable")]
    if len(left) != len(right) or not np.allclose(mesh.nodes[left, 1], mesh.nodes[right, 1], rtol=0, atol=1e-12):
        _LOGGER.error(f"❌ FEM: {len(left)} left and {len(right)} right boundary nodes do not match")
        raise FemError("Left and right boundary nodes are not matched for antiperiodic coupling")
    return BoundaryConditions(mesh.n_nodes, dirichlet, left, right)


def solve(K, rhs, bc):
    """Решение сокращённой системы P'KP u = P'f прямым разложением"""
    P = bc.reduction
    K_r = (P.T @ K @ P).tocsc()
    f_r = P.T @ np.asarray(rhs, dtype=float)
    norm_f = np.linalg.norm(f_r)
    if norm_f == 0.0:
        return FieldSolution(u=np.zeros(bc.n_nodes), residual=0.0)
    try:
        u_r = splu(K_r).solve(f_r)
    except (RuntimeError, ValueError) as ex:
        _LOGGER.error(f"❌ FEM: factorization failed: {ex}")
        raise FemSolverError(f"Reduced system is singular: {ex}") from ex
    if not np.all(np.isfinite(u_r)):
        raise FemSolverError("Reduced system produced non-finite values")
    residual = float(np.linalg.norm(K_r @ u_r - f_r) / norm_f)
    if residual > SOLVER_RESIDUAL_TOL:
        _LOGGER.error(f"❌ FEM: relative residual {residual:.3e} above {SOLVER_RESIDUAL_TOL}")
        raise FemSolverError(f"Relative residual {residual:.3e} exceeds {SOLVER_RESIDUAL_TOL}")
    _LOGGER.debug(f"FEM: solved {K_r.shape[0]} unknowns, residual {residual:.3e}")
    return FieldSolution(u=P @ u_r, residual=residual)


def slot_current_density(mesh, currents):
    """Плотности тока пазов для фазных токов {phase: A}"""
    winding = mesh.winding
    j_src = np.zeros(len(winding.phases))
    for s, (phase, sign) in enumerate(zip(winding.phases, winding.signs)):
        j_src[s] = sign * winding.turns * currents.get(phase, 0.0) / mesh.slot_areas[s]
    return j_src


def flux_linkage(solution, mesh, phase):
    """Потокосцепление фазы: средний MVP по пазам со знаком и витками, на длину и число полюсов"""
    winding = mesh.winding
    if phase not in winding.phases:
        _LOGGER.error(f"❌ FEM: unknown phase '{phase}'")
        raise FemError(f"Unknown phase tag '{phase}', expected one of {sorted(set(winding.phases))}")
    u = solution.u if isinstance(solution, FieldSolution) else np.asarray(solution)
    total = 0.0
    for s, (slot_phase, sign) in enumerate(zip(winding.phases, winding.signs)):
        if slot_phase == phase:
            total += sign * winding.turns * float(mesh.slot_loads[s] @ u) / mesh.slot_areas[s]
    return winding.n_poles * winding.length * total


def write_mesh_csv(mesh, directory):
    """Экспорт nodes.csv (id,x,y,boundary_tag) и tris.csv (n1,n2,n3,region)"""
    nodes_path = os.path.join(directory, "nodes.csv")
    tris_path = os.path.join(directory, "tris.csv")
    with open(nodes_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "x", "y", "boundary_tag"])
        for k, ((x, y), tag) in enumerate(zip(mesh.nodes, mesh.node_tags)):
            writer.writerow([k, FLOAT_FORMAT.format(x), FLOAT_FORMAT.format(y), tag])
    with open(tris_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n1", "n2", "n3", "region"])
        for (a, b, c), region in zip(mesh.triangles, mesh.regions):
            writer.writerow([a, b, c, region])
    return nodes_path, tris_path


class FemError(Exception):
    """Ошибка конечно-элементной модели"""
    pass


class GeometryError(FemError):
    """Недопустимая геометрия полюса или магнита"""
    pass


class FemSolverError(FemError):
    """Сокращённая система вырождена или не решилась с нужной точностью"""
    pass
