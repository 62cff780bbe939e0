"""Sequential Quadratic Programming for smooth inequality-constrained problems.

    minimize    f(x)
    subject to  c(x) <= 0,  lower <= x <= upper

Each iteration solves a QP subproblem with a damped-BFGS model of the
Lagrangian Hessian (primal active-set method, elastic relaxation when the
linearized constraints are inconsistent) and globalizes with an l1-merit
Armijo line search.
"""
import csv
import logging
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .const import *

_LOGGER = logging.getLogger(__name__)

# Решение QP-подзадачи
QpSolution = namedtuple("QpSolution", ["step", "multipliers", "relaxed", "iterations"])

# Строка трассы итераций
TraceRow = namedtuple("TraceRow", ["iter", "f", "kkt", "maxviol", "step_norm"])

TRACE_HEADER = TraceRow._fields

ELASTIC_PENALTY = 1e4
QP_TOL = 1e-12
QP_FEAS_TOL = 1e-10
QP_MULTIPLIER_TOL = 1e-10
PHASE_ONE_REGULARIZATION = 1e-8


@dataclass
class NlpProblem:
    """Гладкая задача с ограничениями-неравенствами c(x) <= 0"""

    n: int
    objective: object
    constraints: object
    gradient: object
    jacobian: object
    lower: np.ndarray = None
    upper: np.ndarray = None
    nc: int = 0

    def __post_init__(self):
        self.lower = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if np.any(self.lower > self.upper):
            raise SqpError("Variable bounds must satisfy lower <= upper")


@dataclass(frozen=True)
class SqpOptions:
    """Настройки решателя"""

    tol: float = DEFAULT_SQP_TOL
    feas_tol: float = DEFAULT_SQP_FEAS_TOL
    max_iter: int = DEFAULT_SQP_MAX_ITER
    backtrack: float = DEFAULT_ARMIJO_FACTOR
    max_backtracks: int = 30


@dataclass
class SqpResult:
    """Итог оптимизации"""

    x_star: np.ndarray
    f_star: float
    constraints: np.ndarray
    multipliers: np.ndarray
    iterations: int
    status: str
    kkt: float = np.inf
    trace: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status == STATUS_CONVERGED


def _kkt_solve(H, g, A_w, r):
    """Система активного множества: H p + A_w' lam = -g, A_w p = r"""
    n = H.shape[0]
    k = A_w.shape[0]
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = H
    kkt[:n, n:] = A_w.T
    kkt[n:, :n] = A_w
    rhs = np.concatenate([-g, r])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _active_set(H, g, A, b, d0, max_iter):
    """Прямой метод активного множества для выпуклой QP: min 1/2 d'Hd + g'd, Ad <= b"""
    d = d0.copy()
    m = A.shape[0]
    slack = QP_TOL * (1.0 + np.abs(b))
    working = []
    for i in range(m):
        # только линейно независимые строки
        if A[i] @ d - b[i] >= -slack[i] and np.linalg.matrix_rank(A[working + [i]]) == len(working) + 1:
            working.append(i)
    at_minimizer = False
    for iteration in range(1, max_iter + 1):
        A_w = A[working]
        p, lam_w = _kkt_solve(H, H @ d + g, A_w, b[working] - A_w @ d)
        p_norm = np.linalg.norm(p, np.inf)
        # после полного шага d уже минимум на рабочем множестве, p - шум
        if at_minimizer or p_norm <= QP_TOL * (1.0 + np.linalg.norm(d, np.inf)):
            if not working or np.min(lam_w) >= -QP_MULTIPLIER_TOL * (1.0 + np.linalg.norm(lam_w, np.inf)):
                lam = np.zeros(m)
                lam[working] = np.maximum(lam_w, 0.0)
                return d, lam, iteration
            working.pop(int(np.argmin(lam_w)))
            at_minimizer = False
            continue
        alpha = 1.0
        blocking = None
        Ap = A @ p
        for i in range(m):
            if i in working or Ap[i] <= QP_TOL * p_norm:
                continue
            step = (b[i] - A[i] @ d) / Ap[i]
            if step < alpha:
                alpha = max(step, 0.0)
                blocking = i
        d = d + alpha * p
        if blocking is None:
            at_minimizer = True
        else:
            working.append(blocking)
    raise QpError(f"Active-set QP did not converge in {max_iter} iterations")


def _elastic_system(A_all, nc, n):
    """Строки A d - t <= b с общим слаком t >= 0 у первых nc ограничений"""
    A_e = np.zeros((A_all.shape[0] + 1, n + 1))
    A_e[:A_all.shape[0], :n] = A_all
    A_e[:nc, n] = -1.0
    A_e[-1, n] = -1.0
    return A_e


def _phase_one(A_all, b_all, nc, n, max_iter):
    """Минимальный общий слак линеаризованных ограничений и точка, где он достигается"""
    x0 = np.zeros(n + 1)
    x0[n] = float(np.max(A_all[:nc] @ x0[:n] - b_all[:nc], initial=0.0))
    H_1 = PHASE_ONE_REGULARIZATION * np.eye(n + 1)
    g_1 = np.zeros(n + 1)
    g_1[n] = 1.0
    x, _, _ = _active_set(H_1, g_1, _elastic_system(A_all, nc, n), np.concatenate([b_all, [0.0]]), x0, max_iter)
    return x[:n], max(float(x[n]), 0.0)


def solve_qp(H, g, A=None, b=None, bounds=None, max_iter=500):
    """QP-подзадача: min 1/2 d'Hd + g'd при Ad <= b и границах шага.

    Если множество Ad <= b с границами пусто (проверка первой фазы),
    решается эластичная релаксация с общим слаком t >= 0, и результат
    помечается relaxed=True.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    g = np.asarray(g, dtype=float)
    n = len(g)
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float)
    nc = A.shape[0]
    rows = [A]
    rhs = [b]
    if bounds is not None:
        lo, hi = (np.asarray(v, dtype=float) for v in bounds)
        for j in range(n):
            if np.isfinite(hi[j]):
                row = np.zeros(n)
                row[j] = 1.0
                rows.append(row[None, :])
                rhs.append([hi[j]])
            if np.isfinite(lo[j]):
                row = np.zeros(n)
                row[j] = -1.0
                rows.append(row[None, :])
                rhs.append([-lo[j]])
    A_all = np.vstack(rows)
    b_all = np.concatenate([np.asarray(r, dtype=float) for r in rhs])
    d0 = np.zeros(n)
    shortfall = 0.0
    if not np.all(A_all @ d0 <= b_all + QP_TOL):
        d0, shortfall = _phase_one(A_all, b_all, nc, n, max_iter)
    if shortfall <= QP_FEAS_TOL * (1.0 + float(np.max(np.abs(b_all), initial=0.0))):
        d, lam, iterations = _active_set(H, g, A_all, b_all, d0, max_iter)
        return QpSolution(step=d, multipliers=lam[:nc], relaxed=False, iterations=iterations)

    _LOGGER.warning(f"⚠️ SQP: linearized constraints inconsistent (shortfall {shortfall:.3e}), solving elastic QP")
    H_e = np.zeros((n + 1, n + 1))
    H_e[:n, :n] = H
    H_e[n, n] = 1e-8 * max(1.0, np.max(np.abs(np.diag(H))))
    g_e = np.concatenate([g, [ELASTIC_PENALTY]])
    # слак только у общих ограничений, границы шага остаются жёсткими
    A_e = _elastic_system(A_all, nc, n)
    b_e = np.concatenate([b_all, [0.0]])
    x0 = np.concatenate([d0, [shortfall]])
    x0[n] = max(x0[n], float(np.max(A_all[:nc] @ d0 - b_all[:nc], initial=0.0)))
    d, lam, iterations = _active_set(H_e, g_e, A_e, b_e, x0, max_iter)
    return QpSolution(step=d[:n], multipliers=lam[:nc], relaxed=True, iterations=iterations)


def finite_diff_grad(f, x, h=1e-6):
    """Центральные разности по каждой координате"""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        try:
            grad[j] = (f(x + e) - f(x - e)) / (2.0 * h)
        except Exception as ex:
            _LOGGER.error(f"❌ SQP: finite difference failed at coordinate {j}: {ex}")
            raise FiniteDifferenceError(f"Evaluation failed while differencing coordinate {j}: {ex}") from ex
    return grad


def _merit(f, c, rho):
    return f + rho * float(np.sum(np.maximum(c, 0.0)))


def _bfgs_update(H, s, y):
    """Демпфированное обновление BFGS (Пауэлл)"""
    Hs = H @ s
    sHs = float(s @ Hs)
    sy = float(s @ y)
    if sHs <= 0:
        return H
    if sy < POWELL_DAMPING * sHs:
        theta = (1.0 - POWELL_DAMPING) * sHs / (sHs - sy)
        y = theta * y + (1.0 - theta) * Hs
        sy = float(s @ y)
    H = H - np.outer(Hs, Hs) / sHs + np.outer(y, y) / sy
    return 0.5 * (H + H.T)


def sqp_solve(problem, x0, options=None, callback=None):
    """SQP с демпфированным BFGS и l1-штрафной функцией"""
    options = options or SqpOptions()
    x = np.asarray(x0, dtype=float).copy()
    if np.any(x < problem.lower) or np.any(x > problem.upper):
        _LOGGER.error(f"❌ SQP: start point {x} outside bounds")
        raise PreconditionError(f"Start point {x.tolist()} lies outside the variable bounds")

    f = float(problem.objective(x))
    c = np.atleast_1d(np.asarray(problem.constraints(x), dtype=float))
    g = np.asarray(problem.gradient(x), dtype=float)
    J = np.atleast_2d(np.asarray(problem.jacobian(x), dtype=float)).reshape(len(c), len(x))
    H = np.eye(len(x))
    mu = np.zeros(len(c))
    rho = 1.0
    trace = []
    kkt = np.inf
    status = STATUS_MAX_ITER
    _LOGGER.info(f"🚀 SQP: start f={f:.6g}, maxviol={max(0.0, float(np.max(c, initial=0.0))):.3e}")

    for iteration in range(1, options.max_iter + 1):
        try:
            qp = solve_qp(H, g, J, -c, bounds=(problem.lower - x, problem.upper - x))
        except QpError as ex:
            _LOGGER.error(f"❌ SQP: subproblem failed at iteration {iteration}: {ex}")
            status = STATUS_QP_FAILURE
            break
        d = qp.step
        mu = qp.multipliers
        maxviol = max(0.0, float(np.max(c, initial=0.0)))
        stationarity = float(np.linalg.norm(H @ d, np.inf))
        complementarity = float(np.max(np.abs(mu * c), initial=0.0))
        kkt = max(stationarity, complementarity)
        step_norm = float(np.linalg.norm(d))
        trace.append(TraceRow(iteration, f, kkt, maxviol, step_norm))
        _LOGGER.debug(f"SQP: iter {iteration} f={f:.10g} kkt={kkt:.3e} maxviol={maxviol:.3e} |d|={step_norm:.3e}")
        if callback is not None:
            callback(trace[-1])

        if kkt <= options.tol and maxviol <= options.feas_tol:
            status = STATUS_CONVERGED
            break
        if qp.relaxed and step_norm <= options.tol:
            status = STATUS_INFEASIBLE
            _LOGGER.warning("⚠️ SQP: stuck at an infeasible stationary point")
            break

        rho = max(rho, 1.1 * float(np.max(mu, initial=0.0)) + 1e-6)
        phi0 = _merit(f, c, rho)
        slope = float(g @ d) - rho * float(np.sum(np.maximum(c, 0.0)))
        if slope >= 0:
            slope = -float(d @ H @ d)

        accepted = None
        alpha = 1.0
        for attempt in range(options.max_backtracks):
            trial = _trial(problem, x, d, alpha)
            if trial is not None:
                phi = _merit(trial[1], trial[2], rho)
                if attempt == 0:
                    trial, phi = _refine(problem, x, d, phi0, slope, phi, trial, rho)
                if phi <= phi0 + ARMIJO_ETA * trial[0] * slope or step_norm * trial[0] <= 1e-15:
                    accepted = trial
                    break
            alpha *= options.backtrack
        if accepted is None:
            status = STATUS_LINE_SEARCH_FAILURE
            _LOGGER.warning(f"⚠️ SQP: line search failed at iteration {iteration}")
            break

        alpha, f_new, c_new, x_new = accepted
        try:
            g_new = np.asarray(problem.gradient(x_new), dtype=float)
            J_new = np.atleast_2d(np.asarray(problem.jacobian(x_new), dtype=float)).reshape(len(c), len(x))
        except Exception as ex:
            _LOGGER.error(f"❌ SQP: gradient evaluation failed at accepted point: {ex}")
            status = STATUS_LINE_SEARCH_FAILURE
            break
        s = x_new - x
        y = (g_new + J_new.T @ mu) - (g + J.T @ mu)
        H = _bfgs_update(H, s, y)
        x, f, c, g, J = x_new, f_new, c_new, g_new, J_new
    else:
        _LOGGER.warning(f"⚠️ SQP: reached {options.max_iter} iterations")

    _LOGGER.info(f"✅ SQP: {status} after {len(trace)} iterations, f*={f:.10g}, kkt={kkt:.3e}")
    return SqpResult(x_star=x, f_star=f, constraints=c, multipliers=mu,
                     iterations=len(trace), status=status, kkt=kkt, trace=trace)


def _trial(problem, x, d, alpha):
    """Пробная точка; None, если вычисление не удалось"""
    x_new = np.clip(x + alpha * d, problem.lower, problem.upper)
    try:
        f_new = float(problem.objective(x_new))
        c_new = np.atleast_1d(np.asarray(problem.constraints(x_new), dtype=float))
    except Exception as ex:
        _LOGGER.debug(f"SQP: trial point rejected (alpha={alpha:.3e}): {ex}")
        return None
    if not np.isfinite(f_new) or not np.all(np.isfinite(c_new)):
        return None
    return alpha, f_new, c_new, x_new


def _refine(problem, x, d, phi0, slope, phi1, trial, rho):
    """Квадратичная интерполяция штрафной функции вдоль d; берётся лучшая точка"""
    curvature = phi1 - phi0 - slope
    if curvature <= 0:
        return trial, phi1
    alpha_q = -slope / (2.0 * curvature)
    if not 0.05 < alpha_q < 4.0 or abs(alpha_q - 1.0) < 1e-12:
        return trial, phi1
    if np.any(x + alpha_q * d < problem.lower) or np.any(x + alpha_q * d > problem.upper):
        return trial, phi1
    candidate = _trial(problem, x, d, alpha_q)
    if candidate is None:
        return trial, phi1
    phi_q = _merit(candidate[1], candidate[2], rho)
    if phi_q < phi1:
        return candidate, phi_q
    return trial, phi1


def write_trace_csv(trace, path):
    """Экспорт трассы: iter,f,kkt,maxviol,step_norm"""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for row in trace:
            writer.writerow([row.iter] + [FLOAT_FORMAT.format(v) for v in row[1:]])


class SqpError(Exception):
    """Ошибка оптимизатора"""
    pass


class FiniteDifferenceError(SqpError):
    """Вычисление функции при конечных разностях не удалось"""
    pass


class PreconditionError(SqpError):
    """Нарушено предусловие запуска"""
    pass


class QpError(SqpError):
    """Активное множество не сошлось"""
    pass
