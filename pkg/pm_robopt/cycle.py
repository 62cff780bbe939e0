"""Driving cycle: speed spline, uncertainty scenarios and longitudinal vehicle dynamics."""
import csv
import logging
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_legendre

from .const import *

_LOGGER = logging.getLogger(__name__)

# Контрольная точка сплайна
ControlPoint = namedtuple("ControlPoint", ["t", "v"])

# Рабочая точка двигателя
OperatingPoint = namedtuple("OperatingPoint", [
    "t",         # Время, с
    "omega_m",   # Механическая угловая скорость, рад/с
    "torque_m",  # Механический момент, Н·м
])

# Одна реализация случайных параметров цикла
CycleSample = namedtuple("CycleSample", [
    "v_shifts",    # s_i в [-1, 1] для сценария A
    "t_shifts",    # tau_i в [-1, 1] для сценария B
    "crr_factor",  # [0, 1]
    "cd_factor",   # [0, 1]
])

Heatmap = namedtuple("Heatmap", ["counts", "m_edges", "w_edges"])

HEATMAP_HEADER = ("m_lo", "m_hi", "w_lo", "w_hi", "count")
CYCLE_HEADER = ("t", "v")


class DrivingCycle:
    """Кусочно-линейный профиль скорость-время"""

    def __init__(self, points):
        points = [ControlPoint(float(t), float(v)) for t, v in points]
        if len(points) < 2:
            raise CycleError("A driving cycle needs at least two control points")
        t = np.array([p.t for p in points])
        v = np.array([p.v for p in points])
        if np.any(t < 0) or np.any(v < 0):
            raise CycleError("Control points must have t >= 0 and v >= 0")
        if np.any(np.diff(t) <= 0):
            raise CycleError(f"Control-point times must be strictly increasing: {t.tolist()}")
        if v[0] != 0 or v[-1] != 0:
            raise CycleError("A driving cycle must start and end at standstill")
        self._t = t
        self._v = v
        self._t.flags.writeable = False
        self._v.flags.writeable = False

    @property
    def points(self):
        return [ControlPoint(t, v) for t, v in zip(self._t.tolist(), self._v.tolist())]

    @property
    def times(self):
        return self._t

    @property
    def velocities(self):
        return self._v

    @property
    def t_first(self):
        return float(self._t[0])

    @property
    def t_last(self):
        return float(self._t[-1])

    @property
    def duration(self):
        return self.t_last - self.t_first

    def __len__(self):
        return len(self._t)

    def __eq__(self, other):
        if not isinstance(other, DrivingCycle):
            return NotImplemented
        return np.array_equal(self._t, other._t) and np.array_equal(self._v, other._v)

    def __repr__(self):
        return f"DrivingCycle({len(self)} points, {self.t_first}..{self.t_last} s)"


@dataclass(frozen=True)
class VehicleParams:
    """Параметры продольной динамики транспортного средства"""

    mass: float = DEFAULT_MASS
    wheel_radius: float = DEFAULT_WHEEL_RADIUS
    gear_ratio: float = DEFAULT_GEAR_RATIO
    frontal_area: float = DEFAULT_FRONTAL_AREA
    air_density: float = DEFAULT_AIR_DENSITY
    gravity: float = DEFAULT_GRAVITY
    crr_dry: float = DEFAULT_CRR_DRY
    cd_dry: float = DEFAULT_CD_DRY

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise CycleError(f"Vehicle parameter '{name}' must be strictly positive, got {value}")

    @property
    def speed_ratio(self):
        """omega_m / v, рад/м"""
        return self.gear_ratio / self.wheel_radius


@dataclass(frozen=True)
class CycleScenarioParams:
    """Сила отклонений сценариев A, B и C"""

    delta_v: float = DEFAULT_DELTA_V
    alpha: float = DEFAULT_ALPHA
    delta_rr: float = DEFAULT_DELTA_RR
    delta_d: float = DEFAULT_DELTA_D
    vertical_indices: tuple = field(default=VERTICAL_INDICES)
    horizontal_indices: tuple = field(default=HORIZONTAL_INDICES)

    def __post_init__(self):
        if not 0 <= self.delta_v < 1:
            raise CycleError(f"delta_v must be in [0, 1), got {self.delta_v}")
        if not 0 < self.alpha < 1:
            raise CycleError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.delta_rr < 1 or self.delta_d < 1:
            raise CycleError(f"delta_rr and delta_d must be >= 1, got {self.delta_rr}, {self.delta_d}")
        object.__setattr__(self, "vertical_indices", tuple(int(i) for i in self.vertical_indices))
        object.__setattr__(self, "horizontal_indices", tuple(int(i) for i in self.horizontal_indices))


def nominal_sample(params):
    """Реализация без отклонений (центр сценариев A/B, сухая дорога)"""
    return CycleSample(
        v_shifts=(0.0,) * len(params.vertical_indices),
        t_shifts=(0.0,) * len(params.horizontal_indices),
        crr_factor=0.0,
        cd_factor=0.0,
    )


def udc_reference():
    """Urban Driving Cycle из шестнадцати контрольных точек"""
    return DrivingCycle(UDC_POINTS)


def velocity(cycle, t):
    """Скорость в момент t (линейная интерполяция)"""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < cycle.t_first) or np.any(t_arr > cycle.t_last):
        _LOGGER.error(f"❌ Cycle: time {t} outside [{cycle.t_first}, {cycle.t_last}]")
        raise CycleError(f"Time {t} outside cycle domain [{cycle.t_first}, {cycle.t_last}]")
    v = np.interp(t_arr, cycle.times, cycle.velocities)
    return float(v) if v.ndim == 0 else v


def _check_range(values, lo, hi, name):
    arr = np.asarray(values, dtype=float)
    if np.any(arr < lo) or np.any(arr > hi):
        raise CycleError(f"{name} must lie in [{lo}, {hi}], got {arr.tolist()}")
    return arr


def apply_scenario_a(cycle, params, sample):
    """Вертикальный сдвиг контрольных точек: v_i = v̄_i (1 + delta_v s_i)"""
    shifts = _check_range(sample.v_shifts, -1.0, 1.0, "v_shifts")
    if len(shifts) != len(params.vertical_indices):
        raise CycleError(
            f"Scenario A expects {len(params.vertical_indices)} velocity shifts, got {len(shifts)}")
    v = cycle.velocities.copy()
    for index, s in zip(params.vertical_indices, shifts):
        v[index] = cycle.velocities[index] * (1.0 + params.delta_v * s)
    return DrivingCycle(zip(cycle.times, v))


def apply_scenario_b(cycle, params, sample):
    """Горизонтальный сдвиг контрольных точек во времени"""
    taus = _check_range(sample.t_shifts, -1.0, 1.0, "t_shifts")
    if len(taus) != len(params.horizontal_indices):
        raise CycleError(
            f"Scenario B expects {len(params.horizontal_indices)} time shifts, got {len(taus)}")
    t_ref = cycle.times
    t = t_ref.copy()
    for index, tau in zip(params.horizontal_indices, taus):
        if index <= 0 or index >= len(t_ref) - 1:
            raise CycleError(f"Scenario B cannot shift the first or last control point (index {index})")
        if tau < 0:
            t[index] = t_ref[index] + params.alpha * tau * (t_ref[index] - t_ref[index - 1])
        else:
            t[index] = t_ref[index] + params.alpha * tau * (t_ref[index + 1] - t_ref[index])
    return DrivingCycle(zip(t, cycle.velocities))


def effective_coefficients(vehicle, params, sample):
    """Коэффициенты сопротивления качению и аэродинамики с учётом погоды"""
    crr_factor = float(_check_range(sample.crr_factor, 0.0, 1.0, "crr_factor"))
    cd_factor = float(_check_range(sample.cd_factor, 0.0, 1.0, "cd_factor"))
    crr = vehicle.crr_dry * (1.0 + (params.delta_rr - 1.0) * crr_factor)
    cd = vehicle.cd_dry * (1.0 + (params.delta_d - 1.0) * cd_factor)
    return crr, cd


def apply_sample(cycle, params, sample, vertical=True, horizontal=True):
    """Применение сценариев A и/или B к циклу"""
    if vertical and len(sample.v_shifts):
        cycle = apply_scenario_a(cycle, params, sample)
    if horizontal and len(sample.t_shifts):
        cycle = apply_scenario_b(cycle, params, sample)
    return cycle


def _segment_index(cycle, t):
    """Индекс сегмента с правосторонней производной в узлах"""
    index = np.searchsorted(cycle.times, t, side="right") - 1
    return np.clip(index, 0, len(cycle) - 2)


def _shaft_torque(vehicle, crr, cd, v, accel):
    """Момент на валу: инерция, качение (только при v > 0) и аэродинамика"""
    rolling = np.where(v > 0, vehicle.mass * vehicle.gravity * crr, 0.0)
    drag = 0.5 * vehicle.air_density * cd * vehicle.frontal_area * v ** 2
    return (vehicle.mass * accel + rolling + drag) / vehicle.speed_ratio


def trajectory(cycle, vehicle, crr, cd, times):
    """Векторизованный расчёт (omega_m, M_m) для массива моментов времени"""
    t = np.atleast_1d(np.asarray(times, dtype=float))
    v = velocity(cycle, t)
    seg = _segment_index(cycle, t)
    dt = cycle.times[seg + 1] - cycle.times[seg]
    accel = (cycle.velocities[seg + 1] - cycle.velocities[seg]) / dt
    omega = vehicle.speed_ratio * v
    return omega, _shaft_torque(vehicle, crr, cd, v, accel)


def torque_speed_at(cycle, vehicle, crr, cd, t):
    """Рабочая точка двигателя в момент t"""
    omega, torque = trajectory(cycle, vehicle, crr, cd, [t])
    return OperatingPoint(t=float(t), omega_m=float(omega[0]), torque_m=float(torque[0]))


def peak_torque(cycle, vehicle, crr, cd):
    """Наибольший по модулю момент на цикле (супремум на каждом сегменте)"""
    peak = 0.0
    for k in range(len(cycle) - 1):
        t0, t1 = cycle.times[k], cycle.times[k + 1]
        # момент на сегменте монотонен по v, экстремумы на концах
        ends = np.array([t0, np.nextafter(t1, t0)])
        _, torque = trajectory(cycle, vehicle, crr, cd, ends)
        peak = max(peak, float(np.max(np.abs(torque))))
    return peak


def envelope_peak_torque(cycle, vehicle, params, vertical=True, horizontal=True, weather=True):
    """Оценка пика |M_m| по реализациям сценариев A, B и C.

    Каждый сегмент проверяется во всех углах области: крайние скорости и
    времена его концов, сухая и мокрая дорога. Углы соседних сегментов
    перебираются независимо.
    """
    t, v = cycle.times, cycle.velocities
    coefficients = [(vehicle.crr_dry, vehicle.cd_dry)]
    if weather:
        coefficients.append((vehicle.crr_dry * params.delta_rr, vehicle.cd_dry * params.delta_d))

    def corners(j):
        speeds = [float(v[j])]
        if vertical and j in params.vertical_indices:
            speeds = [float(v[j]) * (1.0 - params.delta_v), float(v[j]) * (1.0 + params.delta_v)]
        times = [float(t[j])]
        if horizontal and j in params.horizontal_indices and 0 < j < len(t) - 1:
            times = [t[j] - params.alpha * (t[j] - t[j - 1]), t[j] + params.alpha * (t[j + 1] - t[j])]
        return [(tj, vj) for tj in times for vj in speeds]

    peak = 0.0
    for k in range(len(cycle) - 1):
        for t0, v0 in corners(k):
            for t1, v1 in corners(k + 1):
                if t1 <= t0:
                    continue
                accel = (v1 - v0) / (t1 - t0)
                for crr, cd in coefficients:
                    for speed in (v0, v1):
                        peak = max(peak, abs(float(_shaft_torque(vehicle, crr, cd, speed, accel))))
    _LOGGER.debug(f"Cycle: envelope peak torque {peak:.6g} N·m")
    return peak


def torque_zero_crossings(cycle, vehicle, crr, cd):
    """Моменты смены знака момента на валу внутри сегментов"""
    drag = 0.5 * vehicle.air_density * cd * vehicle.frontal_area
    crossings = []
    if drag <= 0:
        return np.zeros(0)
    for k in range(len(cycle) - 1):
        t0, t1 = cycle.times[k], cycle.times[k + 1]
        v0, v1 = cycle.velocities[k], cycle.velocities[k + 1]
        accel = (v1 - v0) / (t1 - t0)
        # m a + m g crr + drag v^2 = 0 имеет один корень по v > 0
        demand = -vehicle.mass * (accel + vehicle.gravity * crr)
        if accel == 0 or demand <= 0:
            continue
        v_star = np.sqrt(demand / drag)
        if min(v0, v1) < v_star < max(v0, v1):
            crossings.append(t0 + (v_star - v0) / accel)
    return np.array(crossings)


def quadrature_nodes(cycle, order, breaks=None):
    """Составная квадратура Гаусса-Лежандра по сегментам сплайна.

    breaks дополнительно делят сегменты, например в нулях момента.
    """
    if order < 1:
        raise CycleError(f"Quadrature order must be >= 1, got {order}")
    x, w = roots_legendre(int(order))
    knots = cycle.times
    if breaks is not None and len(breaks):
        inner = np.asarray(breaks, dtype=float)
        inner = inner[(inner > cycle.t_first) & (inner < cycle.t_last)]
        knots = np.unique(np.concatenate([knots, inner]))
    t0 = knots[:-1, None]
    half = 0.5 * np.diff(knots)[:, None]
    nodes = t0 + half * (x[None, :] + 1.0)
    weights = half * w[None, :]
    return list(zip(nodes.ravel().tolist(), weights.ravel().tolist()))


def quadrature_arrays(cycle, order, breaks=None):
    """Узлы и веса составной квадратуры как массивы numpy"""
    pairs = quadrature_nodes(cycle, order, breaks)
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def heatmap_bins(cycle, vehicle, crr, cd, n_m, n_w, dt):
    """Гистограмма (момент, скорость) при равномерной выборке траектории"""
    if n_m < 1 or n_w < 1:
        raise CycleError(f"Heatmap needs at least one bin per axis, got {n_m}x{n_w}")
    if dt <= 0:
        raise CycleError(f"Sampling step must be positive, got {dt}")
    count = int(np.floor(cycle.duration / dt + 1e-9)) + 1
    times = cycle.t_first + dt * np.arange(count)
    omega, torque = trajectory(cycle, vehicle, crr, cd, times)
    m_edges = _edges(torque, n_m)
    w_edges = _edges(omega, n_w)
    counts, _, _ = np.histogram2d(torque, omega, bins=[m_edges, w_edges])
    _LOGGER.debug(f"📊 Cycle: heatmap {n_m}x{n_w} from {count} samples")
    return Heatmap(counts=counts.astype(int), m_edges=m_edges, w_edges=w_edges)


def _edges(values, bins):
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        # вырожденная траектория: одна ячейка вокруг значения
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def write_cycle_csv(cycle, path):
    """Экспорт цикла в CSV с заголовком t,v"""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CYCLE_HEADER)
        for point in cycle.points:
            writer.writerow([FLOAT_FORMAT.format(point.t), FLOAT_FORMAT.format(point.v)])


def read_cycle_csv(path):
    """Импорт цикла из CSV с заголовком t,v"""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CYCLE_HEADER:
            raise CycleError(f"Cycle CSV must start with header 't,v', got {','.join(header)}")
        points = [(float(row[0]), float(row[1])) for row in reader if row]
    return DrivingCycle(points)


def write_heatmap_csv(heatmap, path):
    """Экспорт гистограммы в CSV"""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEATMAP_HEADER)
        for i in range(len(heatmap.m_edges) - 1):
            for j in range(len(heatmap.w_edges) - 1):
                writer.writerow([
                    FLOAT_FORMAT.format(heatmap.m_edges[i]),
                    FLOAT_FORMAT.format(heatmap.m_edges[i + 1]),
                    FLOAT_FORMAT.format(heatmap.w_edges[j]),
                    FLOAT_FORMAT.format(heatmap.w_edges[j + 1]),
                    int(heatmap.counts[i, j]),
                ])


class CycleError(Exception):
    """Ошибка описания или обработки ездового цикла"""
    pass
