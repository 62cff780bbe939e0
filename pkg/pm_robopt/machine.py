"""dq model of the machine: loading-method extraction, MTPA control and cycle efficiency.

Currents and flux linkages are RMS quantities; phase currents are
sqrt(2) I cos(gamma - phi_k) and the Park projection is amplitude invariant.
The current angle beta is measured from the d-axis.
"""
import csv
import logging
from collections import namedtuple
from dataclasses import dataclass, replace

import numpy as np

from .const import *
from .cycle import quadrature_arrays, torque_zero_crossings, trajectory
from .fem import (
    assemble_affine,
    boundary_conditions,
    flux_linkage,
    slot_current_density,
    solve,
)

_LOGGER = logging.getLogger(__name__)

# Решение задачи MTPA для одного момента
CurrentSolution = namedtuple("CurrentSolution", ["i", "beta"])

# Строки карты КПД и траектории
EfficiencyPoint = namedtuple("EfficiencyPoint", ["i", "omega_rpm", "eff"])
TrajectoryPoint = namedtuple("TrajectoryPoint", ["t", "i", "omega_rpm"])

BISECTION_STEPS = 200
NEWTON_STEPS = 3
TORQUE_RTOL = 1e-12


@dataclass(frozen=True)
class DqParams:
    """Сосредоточенные параметры машины"""

    phi0: float
    ld: float
    lq: float
    rst: float = DEFAULT_RST
    npp: int = DEFAULT_NPP
    m: int = DEFAULT_PHASES
    i_max: float = 0.0

    def __post_init__(self):
        if self.phi0 < 0 or self.ld <= 0 or self.lq <= 0:
            raise MachineError(f"Need phi0 >= 0 and ld, lq > 0, got phi0={self.phi0}, ld={self.ld}, lq={self.lq}")
        if self.rst < 0 or self.i_max < 0:
            raise MachineError(f"Need rst >= 0 and i_max >= 0, got rst={self.rst}, i_max={self.i_max}")
        if self.npp < 1 or self.m < 1:
            raise MachineError(f"Need npp >= 1 and m >= 1, got npp={self.npp}, m={self.m}")

    @property
    def saliency(self):
        """L_d - L_q"""
        return self.ld - self.lq

    def with_i_max(self, i_max):
        return replace(self, i_max=float(i_max))

    def as_dict(self):
        return {"phi0": self.phi0, "ld": self.ld, "lq": self.lq, "rst": self.rst,
                "npp": self.npp, "m": self.m, "i_max": self.i_max}


def park_projection(fluxes, phase_axes, angle, m=DEFAULT_PHASES):
    """Проекция фазных потокосцеплений на ось angle (амплитудно-инвариантная)"""
    return 2.0 / m * sum(fluxes[k] * np.cos(angle - phase_axes[k]) for k in fluxes)


def phase_currents(i_rms, gamma, phase_axes):
    """Мгновенные фазные токи для тока с осью gamma"""
    return {k: SQRT2 * i_rms * np.cos(gamma - axis) for k, axis in phase_axes.items()}


def _phase_fluxes(system, materials, p, bc):
    K, rhs = assemble_affine(system, p, materials)
    solution = solve(K, rhs, bc)
    mesh = system.mesh
    return {k: flux_linkage(solution, mesh, k) for k in mesh.winding.axes}


def extract_dq(system, mesh, geom, materials, p, i_test=DEFAULT_I_TEST, rst=DEFAULT_RST, i_max=0.0):
    """Метод нагрузки: холостой ход (только магнит), затем токи по осям d и q без магнита"""
    if i_test <= 0:
        raise MachineError(f"Test current must be positive, got {i_test}")
    winding = mesh.winding
    bc = boundary_conditions(mesh)
    axes = winding.axes
    theta_d = winding.d_axis
    zero = (0.0,) * len(winding.phases)

    fluxes = _phase_fluxes(system, materials.with_sources(j_src=zero), p, bc)
    psi_pm = park_projection(fluxes, axes, theta_d, len(axes))
    phi0 = abs(psi_pm) / SQRT2

    inductances = []
    for gamma in (theta_d, theta_d + 0.5 * np.pi):
        j_src = slot_current_density(mesh, phase_currents(i_test, gamma, axes))
        fluxes = _phase_fluxes(system, materials.with_sources(h_pm=(0.0, 0.0), j_src=j_src), p, bc)
        inductances.append(park_projection(fluxes, axes, gamma, len(axes)) / (SQRT2 * i_test))
    ld, lq = inductances
    if ld <= 0 or lq <= 0:
        _LOGGER.error(f"❌ Machine: non-positive inductance ld={ld}, lq={lq} at p={list(p)}")
        raise MachineError(f"Extracted non-positive inductances ld={ld}, lq={lq}")
    dq = DqParams(phi0=phi0, ld=ld, lq=lq, rst=rst, npp=geom.npp, m=len(axes), i_max=i_max)
    _LOGGER.debug(f"Machine: p={list(p)} phi0={phi0:.6e} ld={ld:.6e} lq={lq:.6e}")
    return dq


def torque(dq, i, beta):
    """M = npp m I sin(beta) (phi0 + (ld - lq) I cos(beta))"""
    i = np.asarray(i, dtype=float)
    beta = np.asarray(beta, dtype=float)
    value = dq.npp * dq.m * i * np.sin(beta) * (dq.phi0 + dq.saliency * i * np.cos(beta))
    return float(value) if np.ndim(value) == 0 else value


def beta_opt(dq, i):
    """Угол MTPA из условия phi0 cos(b) + dL I cos(2b) = 0"""
    i = np.asarray(i, dtype=float)
    dl_i = dq.saliency * i
    root = dq.phi0 + np.sqrt(dq.phi0 ** 2 + 8.0 * dl_i ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_beta = np.where(root > 0, 2.0 * dl_i / np.where(root > 0, root, 1.0), 0.0)
    beta = np.arccos(np.clip(cos_beta, -1.0, 1.0))
    return float(beta) if np.ndim(beta) == 0 else beta


def mtpa_torque(dq, i):
    """Наибольший момент при токе i"""
    return torque(dq, i, beta_opt(dq, i))


def _mtpa_slope(dq, i):
    """dM/dI вдоль MTPA (по теореме об огибающей)"""
    beta = beta_opt(dq, i)
    return dq.npp * dq.m * np.sin(beta) * (dq.phi0 + 2.0 * dq.saliency * i * np.cos(beta))


def max_torque(dq):
    return mtpa_torque(dq, dq.i_max)


def _invert_mtpa(dq, targets, i_hi):
    """Векторизованная бисекция с ньютоновской доводкой для M_mtpa(i) = target >= 0"""
    lo = np.zeros_like(targets)
    hi = np.full_like(targets, i_hi)
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        below = mtpa_torque(dq, mid) < targets
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 1e-15 * np.maximum(hi, 1e-300)):
            break
    i = 0.5 * (lo + hi)
    for _ in range(NEWTON_STEPS):
        slope = _mtpa_slope(dq, i)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(slope > 0, (mtpa_torque(dq, i) - targets) / np.where(slope > 0, slope, 1.0), 0.0)
        candidate = np.clip(i - step, lo, hi)
        i = np.where(np.abs(mtpa_torque(dq, candidate) - targets) <= np.abs(mtpa_torque(dq, i) - targets), candidate, i)
    return np.where(targets > 0, i, 0.0)


def currents_for_torques(dq, targets, times=None):
    """Наименьшие токи и углы для массива моментов (отрицательный момент зеркально)"""
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    magnitude = np.abs(targets)
    limit = max_torque(dq)
    infeasible = magnitude > limit * (1.0 + 1e-12) + 1e-15
    if np.any(infeasible):
        k = int(np.flatnonzero(infeasible)[0])
        where = f" at t={times[k]:.6g} s" if times is not None else ""
        _LOGGER.error(f"❌ Machine: torque {targets[k]:.6g} N·m{where} exceeds max_torque {limit:.6g} N·m")
        raise InfeasibleTorqueError(f"Torque {targets[k]:.6g} N·m{where} exceeds the maximal torque {limit:.6g} N·m")
    i = _invert_mtpa(dq, np.minimum(magnitude, limit), dq.i_max)
    beta = np.where(i > 0, beta_opt(dq, i), 0.5 * np.pi)
    beta = np.where(targets < 0, -beta, beta)
    return i, beta


def current_for_torque(dq, m_target):
    """Наименьший ток, дающий момент m_target при угле MTPA"""
    i, beta = currents_for_torques(dq, [m_target])
    return CurrentSolution(i=float(i[0]), beta=float(beta[0]))


def pointwise_efficiency(dq, omega_m, m_m):
    """KPD в рабочей точке: omega M / (omega M + m rst I^2), ноль при omega M <= 0"""
    omega_m = np.asarray(omega_m, dtype=float)
    m_m = np.asarray(m_m, dtype=float)
    i, _ = currents_for_torques(dq, np.ravel(m_m))
    i = i.reshape(np.shape(m_m))
    power = omega_m * m_m
    loss = dq.m * dq.rst * i ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        eff = np.where(power > 0, power / np.where(power > 0, power + loss, 1.0), 0.0)
    return float(eff) if np.ndim(eff) == 0 else eff


def cycle_efficiency(dq, cycle, vehicle, crr, cd, quad_order=DEFAULT_QUAD_ORDER, mode=EFFICIENCY_SIGNED):
    """Энергетический КПД цикла по составной квадратуре Гаусса.

    signed: механическая мощность входит со знаком в числитель и знаменатель.
    motoring: учитываются только интервалы с omega M > 0.
    """
    if mode not in (EFFICIENCY_SIGNED, EFFICIENCY_MOTORING):
        raise MachineError(f"Unknown efficiency mode '{mode}'")
    # узлы квадратуры не пересекают нули момента
    t, w = quadrature_arrays(cycle, quad_order, breaks=torque_zero_crossings(cycle, vehicle, crr, cd))
    omega, m_m = trajectory(cycle, vehicle, crr, cd, t)
    i, _ = currents_for_torques(dq, m_m, times=t)
    power = omega * m_m
    loss = dq.m * dq.rst * i ** 2
    if mode == EFFICIENCY_MOTORING:
        active = power > 0
        power = np.where(active, power, 0.0)
        loss = np.where(active, loss, 0.0)
    numerator = float(w @ power)
    denominator = float(w @ (power + loss))
    if denominator <= 0.0:
        _LOGGER.error(f"❌ Machine: efficiency undefined, numerator {numerator:.6g}, denominator {denominator:.6g}")
        raise UndefinedEfficiencyError(
            f"Cycle efficiency undefined: numerator {numerator:.6g} J, denominator {denominator:.6g} J")
    return numerator / denominator


def calibrate_i_max(dq, peak, margin=DEFAULT_I_MAX_MARGIN):
    """Ток, при котором max_torque = margin * peak"""
    target = margin * peak
    if target <= 0:
        raise MachineError(f"Calibration target must be positive, got {target}")
    i_hi = 1.0
    while mtpa_torque(dq, i_hi) < target:
        i_hi *= 2.0
        if i_hi > 1e9:
            raise MachineError("Cannot reach the calibration torque with any current")
    i_max = float(_invert_mtpa(dq, np.array([target]), i_hi)[0])
    _LOGGER.info(f"⚙️ Machine: calibrated i_max={i_max:.6g} A for max torque {target:.6g} N·m")
    return dq.with_i_max(i_max)


def _map_axes(i_max, n_current, n_speed, omega_rpm_max):
    return np.linspace(0.0, i_max, n_current), np.linspace(0.0, omega_rpm_max, n_speed)


def _map_efficiency(dq, currents, speeds_rpm):
    """KPD на сетке (I, omega) при угле MTPA; ноль при нулевой мощности"""
    m_m = np.atleast_1d(mtpa_torque(dq, currents))[:, None]
    loss = (dq.m * dq.rst * currents ** 2)[:, None]
    power = (speeds_rpm / RPM_PER_RAD_S)[None, :] * m_m
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(power > 0, power / np.where(power > 0, power + loss, 1.0), 0.0)


def _map_rows(currents, speeds_rpm, values):
    return [EfficiencyPoint(float(i), float(rpm), float(values[a, b]))
            for a, i in enumerate(currents) for b, rpm in enumerate(speeds_rpm)]


def efficiency_map(dq, n_current=41, n_speed=41, omega_rpm_max=1500.0):
    """Карта КПД на равномерной сетке (I, omega) при угле MTPA"""
    currents, speeds = _map_axes(dq.i_max, n_current, n_speed, omega_rpm_max)
    return _map_rows(currents, speeds, _map_efficiency(dq, currents, speeds))


def efficiency_difference(dq_a, dq_b, n_current=41, n_speed=41, omega_rpm_max=1500.0):
    """eps_a - eps_b со знаком на сетке (I, omega) до общего i_max"""
    currents, speeds = _map_axes(min(dq_a.i_max, dq_b.i_max), n_current, n_speed, omega_rpm_max)
    diff = _map_efficiency(dq_a, currents, speeds) - _map_efficiency(dq_b, currents, speeds)
    rows = _map_rows(currents, speeds, diff)
    _LOGGER.debug(f"Machine: efficiency difference in [{diff.min():.3e}, {diff.max():.3e}]")
    return rows


def trajectory_overlay(dq, cycle, vehicle, crr, cd, dt=1.0):
    """Ток и скорость вдоль цикла для наложения на карту КПД"""
    count = int(np.floor(cycle.duration / dt + 1e-9)) + 1
    t = cycle.t_first + dt * np.arange(count)
    omega, m_m = trajectory(cycle, vehicle, crr, cd, t)
    i, _ = currents_for_torques(dq, m_m, times=t)
    return [TrajectoryPoint(float(a), float(b), float(c)) for a, b, c in zip(t, i, omega * RPM_PER_RAD_S)]


def write_efficiency_map_csv(rows, path, column="eff"):
    """Экспорт карты: I,omega_rpm,eff (или deff для разности)"""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["I", "omega_rpm", column])
        for row in rows:
            writer.writerow([FLOAT_FORMAT.format(v) for v in row])


def write_trajectory_csv(rows, path):
    """Экспорт траектории: t,I,omega_rpm"""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "I", "omega_rpm"])
        for row in rows:
            writer.writerow([FLOAT_FORMAT.format(v) for v in row])


class MachineError(Exception):
    """Ошибка модели машины"""
    pass


class InfeasibleTorqueError(MachineError):
    """Требуемый момент больше максимального"""
    pass


class UndefinedEfficiencyError(MachineError):
    """КПД цикла не определён (нулевой знаменатель)"""
    pass
