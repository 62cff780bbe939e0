"""Risk-averse PM design: collocation moments as SQP objective and constraints.

    minimize    p1 p2 + lambda std[p1 p2]
    subject to  E_d - E[eff] + lambda std[eff] <= 0
                M_d - E[M_max] + lambda std[M_max] <= 0
                G(p) <= 0,  p_min <= p <= p_max
"""
import asyncio
import csv
import logging
import threading
from collections import OrderedDict, namedtuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .const import *
from .cycle import (
    CycleSample,
    CycleScenarioParams,
    apply_sample,
    effective_coefficients,
    envelope_peak_torque,
    nominal_sample,
    peak_torque,
)
from .fem import build_reference_mesh, default_materials, precompute_affine
from .machine import (
    InfeasibleTorqueError,
    calibrate_i_max,
    cycle_efficiency,
    extract_dq,
    max_torque,
)
from .sparsegrid import ParameterDimension, ParameterSpace, moments, smolyak
from .sqp import NlpProblem, PreconditionError, SqpOptions, sqp_solve

_LOGGER = logging.getLogger(__name__)

# Значения целевых величин в одной точке
Qoi = namedtuple("Qoi", ["efficiency", "max_torque"])

# Итог проверки методом Монте-Карло
ValidationReport = namedtuple("ValidationReport", [
    "scenario", "design", "n", "successes", "sr_percent", "fail_eff", "fail_torque", "seed",
])

VALIDATION_HEADER = ("scenario", "design", "sr_percent", "n", "seed", "fail_eff", "fail_torque")

N_PM = 3
N_VERTICAL = len(VERTICAL_INDICES)
N_HORIZONTAL = len(HORIZONTAL_INDICES)
N_WEATHER = 2


@dataclass(frozen=True)
class Scenario:
    """Модель неопределённости: сценарий цикла плюс допуски магнита"""

    kind: str
    cycle: object
    vehicle: object
    params: CycleScenarioParams = field(default_factory=CycleScenarioParams)
    delta_p: tuple = (DEFAULT_DELTA_P,) * N_PM

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise RobustError(f"Unknown scenario '{self.kind}', expected one of {SCENARIOS}")
        if len(self.delta_p) != N_PM or any(d < 0 for d in self.delta_p):
            raise RobustError(f"delta_p must hold three non-negative tolerances, got {self.delta_p}")

    @property
    def vertical(self):
        return self.kind in (SCENARIO_A, SCENARIO_AB)

    @property
    def horizontal(self):
        return self.kind in (SCENARIO_B, SCENARIO_AB)

    @property
    def weather(self):
        return self.kind == SCENARIO_C

    @property
    def pm_delta(self):
        """Допуски магнита; номинальный сценарий без допусков"""
        if self.kind == SCENARIO_NOMINAL:
            return (0.0,) * N_PM
        return tuple(float(d) for d in self.delta_p)

    @property
    def space(self):
        """Пространство случайных параметров в порядке: магнит, A, B, C"""
        if self.kind == SCENARIO_NOMINAL:
            return ParameterSpace(())
        dims = [ParameterDimension(f"p{k + 1}", -d, d) for k, d in enumerate(self.delta_p) if d > 0]
        if len(dims) != N_PM:
            raise RobustError("Uncertain scenarios need strictly positive PM tolerances")
        if self.vertical:
            dims += [ParameterDimension(f"v{k + 1}", -1.0, 1.0) for k in range(N_VERTICAL)]
        if self.horizontal:
            dims += [ParameterDimension(f"t{k + 1}", -1.0, 1.0) for k in range(N_HORIZONTAL)]
        if self.weather:
            dims += [ParameterDimension("crr", 0.0, 1.0), ParameterDimension("cd", 0.0, 1.0)]
        return ParameterSpace(tuple(dims))

    def decode(self, z):
        """Точка z в [-1, 1]^d -> (смещение магнита в мм, CycleSample)"""
        z = np.asarray(z, dtype=float)
        dimension = scenario_dimension(self)
        if z.shape != (dimension,):
            raise RobustError(f"Scenario {self.kind} expects a point of dimension {dimension}, got shape {z.shape}")
        sample = nominal_sample(self.params)
        if dimension == 0:
            return np.zeros(N_PM), sample
        x = self.space.to_physical(z)
        offset, k = x[:N_PM], N_PM
        v_shifts, t_shifts, crr_factor, cd_factor = sample
        if self.vertical:
            v_shifts, k = tuple(x[k:k + N_VERTICAL]), k + N_VERTICAL
        if self.horizontal:
            t_shifts, k = tuple(x[k:k + N_HORIZONTAL]), k + N_HORIZONTAL
        if self.weather:
            crr_factor, cd_factor = float(x[k]), float(x[k + 1])
        return offset, CycleSample(v_shifts, t_shifts, crr_factor, cd_factor)


def scenario_dimension(scenario):
    """3 + 8[A] + 4[B] + 2[C]; 0 для номинального"""
    if scenario.kind == SCENARIO_NOMINAL:
        return 0
    return N_PM + N_VERTICAL * scenario.vertical + N_HORIZONTAL * scenario.horizontal + N_WEATHER * scenario.weather


def make_scenario(kind, cycle, vehicle, params=None, delta_p=DEFAULT_DELTA_P):
    """Сценарий с одинаковым допуском по всем параметрам магнита"""
    delta = (delta_p,) * N_PM if np.isscalar(delta_p) else tuple(delta_p)
    return Scenario(kind=kind, cycle=cycle, vehicle=vehicle, params=params or CycleScenarioParams(), delta_p=delta)


@dataclass(frozen=True)
class RobustSpec:
    """Постановка робастной задачи"""

    e_d: float
    m_max_d: float
    lam: float = DEFAULT_LAMBDA
    p_min: tuple = DEFAULT_P_MIN
    p_max: tuple = DEFAULT_P_MAX
    delta_p: tuple = (DEFAULT_DELTA_P,) * N_PM
    quad_order: int = DEFAULT_QUAD_ORDER
    mode: str = EFFICIENCY_SIGNED
    sg_level: int = DEFAULT_SG_LEVEL
    fd_step: float = DEFAULT_FD_STEP

    def __post_init__(self):
        if self.lam < 0:
            raise RobustError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.e_d < 1:
            raise RobustError(f"e_d must lie in (0, 1), got {self.e_d}")
        if not self.m_max_d > 0:
            raise RobustError(f"m_max_d must be positive, got {self.m_max_d}")
        if any(lo >= hi for lo, hi in zip(self.p_min, self.p_max)):
            raise RobustError(f"Design bounds need p_min < p_max, got {self.p_min}, {self.p_max}")
        if self.fd_step <= 0:
            raise RobustError(f"fd_step must be positive, got {self.fd_step}")


class MachineModel:
    """Сетка, аффинная система и кэш dq-параметров по геометрии магнита"""

    def __init__(self, geom, materials=None, refinement=DEFAULT_REFINEMENT, rst=DEFAULT_RST,
                 i_max=0.0, i_test=DEFAULT_I_TEST, cache_size=DEFAULT_DQ_CACHE_SIZE):
        self.geom = geom
        self.mesh = build_reference_mesh(geom, refinement)
        self.materials = materials or default_materials(len(self.mesh.slot_areas))
        self.system = precompute_affine(self.mesh, geom, self.materials)
        self.rst = rst
        self.i_max = i_max
        self.i_test = i_test
        self.cache_limit = cache_size
        self._cache = OrderedDict()
        self._lock = threading.Lock()

    def dq(self, p):
        """dq-параметры для магнита p (мм), с кэшем"""
        key = tuple(float(v) for v in p)
        with self._lock:
            cached = self._cache.get(key)
            if cached is not None:
                self._cache.move_to_end(key)
        if cached is not None:
            return cached
        dq = extract_dq(self.system, self.mesh, self.geom, self.materials, key,
                        i_test=self.i_test, rst=self.rst, i_max=self.i_max)
        with self._lock:
            self._cache[key] = dq
            # LRU: вытесняется самая давняя геометрия
            while len(self._cache) > self.cache_limit:
                self._cache.popitem(last=False)
        return dq

    def calibrate(self, cycle, vehicle, margin=DEFAULT_I_MAX_MARGIN, p=None, params=None):
        """Подбор i_max по пику момента цикла во всех сценариях для начальной геометрии"""
        peak = envelope_peak_torque(cycle, vehicle, params or CycleScenarioParams())
        base = extract_dq(self.system, self.mesh, self.geom, self.materials, tuple(self.geom.p if p is None else p),
                          i_test=self.i_test, rst=self.rst)
        self.i_max = calibrate_i_max(base, peak, margin).i_max
        with self._lock:
            self._cache.clear()
        return self.i_max

    @property
    def cache_size(self):
        return len(self._cache)


def evaluate_qois(p_bar, scenario, z, model, spec):
    """КПД цикла и максимальный момент в точке z пространства сценария"""
    offset, sample = scenario.decode(z)
    p = np.asarray(p_bar, dtype=float) + offset
    cycle = apply_sample(scenario.cycle, scenario.params, sample,
                         vertical=scenario.vertical, horizontal=scenario.horizontal)
    crr, cd = effective_coefficients(scenario.vehicle, scenario.params, sample)
    dq = model.dq(p)
    try:
        efficiency = cycle_efficiency(dq, cycle, scenario.vehicle, crr, cd, spec.quad_order, spec.mode)
    except InfeasibleTorqueError as ex:
        raise SampleInfeasibleError(f"Sample z={np.asarray(z).tolist()} is infeasible: {ex}", z) from ex
    return Qoi(efficiency=efficiency, max_torque=max_torque(dq))


def robust_objective(p_bar, spec, delta=None):
    """J = p1 p2 + lambda std[p1 p2] для независимых равномерных p1, p2 и градиент"""
    p1, p2 = float(p_bar[0]), float(p_bar[1])
    d1, d2 = (spec.delta_p if delta is None else delta)[:2]
    a, b = d1 * d1 / 3.0, d2 * d2 / 3.0
    variance = p1 * p1 * b + a * p2 * p2 + a * b
    std = np.sqrt(max(variance, 0.0))
    value = p1 * p2 + spec.lam * std
    grad = np.array([p2, p1, 0.0])
    if std > 0:
        grad[0] += spec.lam * p1 * b / std
        grad[1] += spec.lam * a * p2 / std
    return value, grad


def geometric_constraints(p_bar, geom, delta):
    """G(p) <= 0: магнит с допусками помещается в окно с запасом"""
    limits = geom.fit_limits
    p1, p2, p3 = (float(v) for v in p_bar)
    d1, d2, d3 = delta
    values = np.array([
        p1 + d1 - limits.p1_max,
        limits.p3_min - (p3 - d3),
        (p2 + d2) + (p3 + d3) - limits.p23_max,
    ])
    jacobian = np.array([
        [1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0],
        [0.0, 1.0, 1.0],
    ])
    return values, jacobian


async def evaluate_nodes_async(func, items, workers=DEFAULT_WORKERS):
    """Параллельный расчёт func(item) в пуле потоков; результаты по порядку, ошибки как значения"""
    loop = asyncio.get_running_loop()
    semaphore = asyncio.Semaphore(max(1, workers))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        async def run(item):
            async with semaphore:
                try:
                    return await loop.run_in_executor(executor, func, item)
                except Exception as ex:
                    return ex

        return await asyncio.gather(*(run(item) for item in items))


def evaluate_nodes(func, items, workers=DEFAULT_WORKERS):
    """Синхронная обёртка над evaluate_nodes_async"""
    items = list(items)
    if workers <= 1:
        results = []
        for item in items:
            try:
                results.append(func(item))
            except Exception as ex:
                results.append(ex)
        return results
    return asyncio.run(evaluate_nodes_async(func, items, workers))


def _moment_gradient(values, grads, grid, std):
    """Градиенты среднего и std (субградиент 0 при обнулённой дисперсии)"""
    w = grid.weights
    mean = float(w @ values)
    d_mean = w @ grads
    if std <= 0:
        return d_mean, np.zeros_like(d_mean)
    d_var = 2.0 * (w * values) @ grads - 2.0 * mean * d_mean
    return d_mean, d_var / (2.0 * std)


def robust_constraints(p_bar, spec, scenario, grid, model, workers=DEFAULT_WORKERS, with_gradient=True):
    """Значения и якобиан [c1, c2, G1, G2, G3] по узлам коллокации"""
    p_bar = np.asarray(p_bar, dtype=float)
    if grid.dimension != scenario_dimension(scenario):
        raise RobustError(f"Grid dimension {grid.dimension} does not match scenario {scenario.kind}")
    h = spec.fd_step

    def node(k):
        z = grid.points[k]
        q0 = np.array(evaluate_qois(p_bar, scenario, z, model, spec))
        if not with_gradient:
            return q0, None
        grad = np.zeros((2, N_PM))
        for j in range(N_PM):
            e = np.zeros(N_PM)
            e[j] = h
            plus = np.array(evaluate_qois(p_bar + e, scenario, z, model, spec))
            minus = np.array(evaluate_qois(p_bar - e, scenario, z, model, spec))
            grad[:, j] = (plus - minus) / (2.0 * h)
        return q0, grad

    results = evaluate_nodes(node, range(len(grid)), workers)
    failed = [k for k, r in enumerate(results) if isinstance(r, Exception)]
    if failed:
        first = results[failed[0]]
        _LOGGER.error(f"❌ Robust: {len(failed)} collocation nodes failed at p={p_bar.tolist()}, first: {first}")
        raise ConstraintEvaluationError(
            f"Collocation nodes {failed[:20]} failed at p={p_bar.tolist()}: {first}", failed)

    values = np.array([r[0] for r in results])
    targets = (spec.e_d, spec.m_max_d)
    c = np.zeros(2)
    jac = np.zeros((2, N_PM))
    for k in range(2):
        mean, std = moments(values[:, k], grid)
        c[k] = targets[k] - mean + spec.lam * std
        if with_gradient:
            grads = np.array([r[1][k] for r in results])
            d_mean, d_std = _moment_gradient(values[:, k], grads, grid, std)
            jac[k] = -d_mean + spec.lam * d_std
    g, g_jac = geometric_constraints(p_bar, model.geom, scenario.pm_delta)
    _LOGGER.debug(f"Robust: p={p_bar.tolist()} c={c.tolist()} G={g.tolist()}")
    return np.concatenate([c, g]), np.vstack([jac, g_jac])


class _CachedEvaluation:
    """Ограничения для SQP: значения в пробных точках, якобиан только в принятых"""

    def __init__(self, spec, scenario, grid, model, workers):
        self.args = (spec, scenario, grid, model, workers)
        self._values = (None, None)
        self._full = (None, None)

    def _compute(self, x, with_gradient):
        spec, scenario, grid, model, workers = self.args
        return robust_constraints(x, spec, scenario, grid, model, workers, with_gradient=with_gradient)

    def values(self, x):
        x = np.asarray(x, dtype=float)
        for key, result in (self._full, self._values):
            if key is not None and np.array_equal(key, x):
                return result[0]
        self._values = (x.copy(), self._compute(x, False))
        return self._values[1][0]

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        key, _ = self._full
        if key is None or not np.array_equal(key, x):
            self._full = (x.copy(), self._compute(x, True))
        return self._full[1][1]


def optimize(spec, scenario, model, x0=DEFAULT_P, options=None, workers=DEFAULT_WORKERS, callback=None):
    """Робастная оптимизация SQP из начальной геометрии x0"""
    x0 = np.asarray(x0, dtype=float)
    delta = scenario.pm_delta
    g0, _ = geometric_constraints(x0, model.geom, delta)
    if np.any(x0 < np.asarray(spec.p_min)) or np.any(x0 > np.asarray(spec.p_max)) or np.any(g0 > 0):
        _LOGGER.error(f"❌ Robust: start design {x0.tolist()} violates G: {g0.tolist()}")
        raise PreconditionError(f"Start design {x0.tolist()} violates the design bounds or G(p) <= 0")

    grid = smolyak(scenario_dimension(scenario), spec.sg_level)
    _LOGGER.info(f"🚀 Robust: optimizing scenario {scenario.kind} on {len(grid)} collocation nodes, lambda={spec.lam}")
    evaluation = _CachedEvaluation(spec, scenario, grid, model, workers)
    problem = NlpProblem(
        n=N_PM,
        objective=lambda x: robust_objective(x, spec, delta)[0],
        gradient=lambda x: robust_objective(x, spec, delta)[1],
        constraints=evaluation.values,
        jacobian=evaluation.jacobian,
        lower=np.asarray(spec.p_min, dtype=float),
        upper=np.asarray(spec.p_max, dtype=float),
        nc=2 + 3,
    )
    result = sqp_solve(problem, x0, options or SqpOptions(), callback=callback)
    _LOGGER.info(f"✅ Robust: scenario {scenario.kind} -> p*={result.x_star.tolist()}, "
                 f"area={result.x_star[0] * result.x_star[1]:.6g} mm², status {result.status}")
    return result


def monte_carlo_validate(p_bar, spec, scenario, model, n=DEFAULT_N_MC, seed=DEFAULT_SEED,
                         workers=DEFAULT_WORKERS, design="design"):
    """Доля выборок, где КПД >= E_d и M_max >= M_d одновременно"""
    if n < 1:
        raise RobustError(f"Monte Carlo needs n >= 1, got {n}")
    dimension = scenario_dimension(scenario)

    def sample(index):
        # независимый поток на выборку: результат не зависит от числа потоков
        rng = np.random.default_rng([seed, index])
        z = rng.uniform(-1.0, 1.0, dimension)
        try:
            q = evaluate_qois(p_bar, scenario, z, model, spec)
        except SampleInfeasibleError:
            return False, True
        return q.efficiency < spec.e_d, q.max_torque < spec.m_max_d

    results = evaluate_nodes(sample, range(n), workers)
    for k, r in enumerate(results):
        if isinstance(r, Exception):
            _LOGGER.error(f"❌ Robust: Monte Carlo sample {k} failed: {r}")
            raise RobustError(f"Monte Carlo sample {k} failed: {r}") from r
    fail_eff = sum(1 for e, _ in results if e)
    fail_torque = sum(1 for _, t in results if t)
    successes = sum(1 for e, t in results if not e and not t)
    report = ValidationReport(scenario=scenario.kind, design=design, n=n, successes=successes,
                              sr_percent=100.0 * successes / n, fail_eff=fail_eff,
                              fail_torque=fail_torque, seed=seed)
    _LOGGER.info(f"📋 Robust: {design} under {scenario.kind}: SR={report.sr_percent:.2f}% ({successes}/{n})")
    return report


def cross_validate(designs, scenarios, spec, model, n=DEFAULT_N_MC, seed=DEFAULT_SEED, workers=DEFAULT_WORKERS):
    """Матрица SR: строка на проект, столбец на сценарий проверки"""
    matrix = {}
    for label, p_bar in designs.items():
        matrix[label] = {
            scenario.kind: monte_carlo_validate(p_bar, spec, scenario, model, n, seed, workers, design=label)
            for scenario in scenarios
        }
    return matrix


def default_targets(model, cycle, vehicle, p_init=DEFAULT_P, quad_order=DEFAULT_QUAD_ORDER, mode=EFFICIENCY_SIGNED):
    """E_d по начальной геометрии, M_d по пику момента цикла (сухая дорога)"""
    dq = model.dq(p_init)
    e_d = cycle_efficiency(dq, cycle, vehicle, vehicle.crr_dry, vehicle.cd_dry, quad_order, mode)
    m_max_d = peak_torque(cycle, vehicle, vehicle.crr_dry, vehicle.cd_dry)
    _LOGGER.info(f"🎯 Robust: targets E_d={e_d:.10g}, M_d={m_max_d:.10g} N·m")
    return e_d, m_max_d


def sampled_product_std(p_bar, delta, n=1_000_000, seed=DEFAULT_SEED):
    """Выборочное std[p1 p2] для сверки с замкнутой формой"""
    rng = np.random.default_rng(seed)
    p1 = rng.uniform(p_bar[0] - delta[0], p_bar[0] + delta[0], n)
    p2 = rng.uniform(p_bar[1] - delta[1], p_bar[1] + delta[1], n)
    return float(np.std(p1 * p2))


def write_validation_csv(reports, path):
    """Экспорт: scenario,design,sr_percent,n,seed,fail_eff,fail_torque"""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(VALIDATION_HEADER)
        for r in reports:
            writer.writerow([r.scenario, r.design, FLOAT_FORMAT.format(r.sr_percent), r.n, r.seed,
                             r.fail_eff, r.fail_torque])


def write_crossval_csv(matrix, designs, path):
    """Матрица перекрёстной проверки: design,area,<сценарии>"""
    kinds = []
    for row in matrix.values():
        for kind in row:
            if kind not in kinds:
                kinds.append(kind)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["design", "area"] + kinds)
        for label, row in matrix.items():
            p = designs[label]
            writer.writerow([label, FLOAT_FORMAT.format(p[0] * p[1])]
                            + [FLOAT_FORMAT.format(row[k].sr_percent) if k in row else "" for k in kinds])


class RobustError(Exception):
    """Ошибка робастной постановки"""
    pass


class SampleInfeasibleError(RobustError):
    """Момент траектории в выборке больше максимального"""

    def __init__(self, message, z=None):
        super().__init__(message)
        self.z = None if z is None else np.asarray(z, dtype=float)


class ConstraintEvaluationError(RobustError):
    """Узлы коллокации не вычислились"""

    def __init__(self, message, nodes=()):
        super().__init__(message)
        self.nodes = list(nodes)
