"""Smooth minimization drivers: Gauss-Newton and limited-memory BFGS.

Both methods share Armijo backtracking (c = 1e-4, step halving, floor 2^-20)
and the stopping rules in :class:`StopRules`. They are deterministic: the
same objective and start point always produce the same trace.

Gauss-Newton works on objectives with residual structure: ``gn_eval(x)``
returns a :class:`GnEval` whose model Hessian is
``J^T diag(weights) J`` (weights may be scalar). For a plain sum of squares
``f = sum r_i^2`` this is the classic GN method (weights = 2). L-BFGS only
needs value and gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "StopRules",
    "OptTrace",
    "GnEval",
    "LeastSquares",
    "ValueGrad",
    "gauss_newton",
    "lbfgs",
]

ARMIJO_C = 1e-4
ARMIJO_FLOOR = 2.0 ** -20
ARMIJO_CEIL = 2.0 ** 20
GRAD_ABS_FLOOR = 1e-12


@dataclass(frozen=True)
class StopRules:
    """max_iterations per run; tolerances are relative (gradient to its
    initial norm, step to 1 + |x|, objective decrease to 1 + |f|)."""

    max_iterations: int = 50
    grad_tol: float = 1e-3
    step_tol: float = 1e-5
    obj_tol: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be >= 1")
        if min(self.grad_tol, self.step_tol, self.obj_tol) <= 0:
            raise InvalidInputError("tolerances must be positive")


@dataclass
class OptTrace:
    """Per-iteration record of one optimizer run. objectives[0] is the start value."""

    objectives: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    step_lengths: list[float] = field(default_factory=list)
    n_evals: int = 0
    reason: str = ""

    @property
    def n_iterations(self) -> int:
        return len(self.step_lengths)


@dataclass
class GnEval:
    """One Gauss-Newton objective evaluation (see module docstring)."""

    value: float
    gradient: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    weights: float | np.ndarray


class ValueGrad:
    """Adapter turning a callable ``f(x) -> (value, gradient)`` into the
    value/value_grad interface both optimizers use."""

    def __init__(self, fn: Callable[[np.ndarray], tuple[float, np.ndarray]]):
        self._fn = fn

    def value(self, x):
        return self._fn(x)[0]

    def value_grad(self, x):
        return self._fn(x)

    def gn_eval(self, x):
        raise InvalidInputError("objective has no residual structure for Gauss-Newton")


class LeastSquares:
    """Sum-of-squares objective ``f = sum r_i(x)^2`` from residual and Jacobian callables."""

    def __init__(self, residuals: Callable[[np.ndarray], np.ndarray],
                 jacobian: Callable[[np.ndarray], np.ndarray]):
        self._res = residuals
        self._jac = jacobian

    def value(self, x):
        r = np.asarray(self._res(x), dtype=np.float64)
        return float(r @ r)

    def value_grad(self, x):
        e = self.gn_eval(x)
        return e.value, e.gradient

    def gn_eval(self, x):
        r = np.asarray(self._res(x), dtype=np.float64)
        jac = np.atleast_2d(np.asarray(self._jac(x), dtype=np.float64))
        return GnEval(value=float(r @ r), gradient=2.0 * (jac.T @ r),
                      residuals=r, jacobian=jac, weights=2.0)


def _as_objective(objective):
    if callable(objective) and not hasattr(objective, "value_grad"):
        return ValueGrad(objective)
    return objective


def _armijo(value_fn, x, f, g, direction, trace, extend=False):
    """Backtracking line search; returns (x_new, f_new, step) or None.

    Starts at the unit step and halves down to the floor. With
    ``extend=True`` (used by L-BFGS, whose directions can be badly scaled),
    a unit step that already satisfies the Armijo condition is doubled while
    the condition keeps holding and the value keeps strictly improving; the
    accepted step always satisfies the Armijo decrease. Gauss-Newton keeps
    the plain unit-step backtracking so its refinements stay local.
    """
    slope = float(g @ direction)

    def accepted(f_trial, step):
        return np.isfinite(f_trial) and f_trial <= f + ARMIJO_C * step * slope

    step = 1.0
    while step >= ARMIJO_FLOOR:
        x_new = x + step * direction
        f_new = value_fn(x_new)
        trace.n_evals += 1
        if accepted(f_new, step):
            break
        step *= 0.5
    else:
        return None
    if extend and step == 1.0:
        while step < ARMIJO_CEIL:
            x_try = x + 2.0 * step * direction
            f_try = value_fn(x_try)
            trace.n_evals += 1
            if not accepted(f_try, 2.0 * step) or f_try >= f_new:
                break
            step *= 2.0
            x_new, f_new = x_try, f_try
    return x_new, f_new, step


def _check_stop(rules, k, f_old, f_new, gnorm_new, gnorm0, x_new, step_vec):
    if gnorm_new <= max(rules.grad_tol * gnorm0, GRAD_ABS_FLOOR):
        return "grad_tol"
    if float(np.linalg.norm(step_vec)) <= rules.step_tol * (1.0 + float(np.linalg.norm(x_new))):
        return "step_tol"
    if f_old - f_new <= rules.obj_tol * (1.0 + abs(f_old)):
        return "obj_tol"
    if k + 1 >= rules.max_iterations:
        return "max_iterations"
    return ""


def gauss_newton(objective, x0, rules: StopRules = StopRules()):
    """Minimize a residual-structured objective. Returns (x, OptTrace).

    Each step solves ``(J^T diag(w) J + lam I) d = -grad`` with Levenberg
    damping ``lam = 1e-8 * trace(H)/n``, which keeps the system solvable on
    flat regions, then backtracks along d. The damped matrix is positive
    definite, so d is always a descent direction.
    """
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    trace = OptTrace()
    ev = objective.gn_eval(x)
    trace.n_evals += 1
    f = ev.value
    gnorm0 = float(np.linalg.norm(ev.gradient))
    trace.objectives.append(f)
    trace.grad_norms.append(gnorm0)
    if gnorm0 <= GRAD_ABS_FLOOR:
        trace.reason = "grad_tol"
        return x, trace

    for k in range(rules.max_iterations):
        jac, w = ev.jacobian, ev.weights
        wj = jac * w[:, None] if isinstance(w, np.ndarray) else jac * w
        h = jac.T @ wj
        n = h.shape[0]
        lam = 1e-8 * max(np.trace(h) / n, GRAD_ABS_FLOOR)
        h_damped = h + lam * np.eye(n)
        try:
            direction = np.linalg.solve(h_damped, -ev.gradient)
        except np.linalg.LinAlgError:
            direction = np.linalg.lstsq(h_damped, -ev.gradient, rcond=None)[0]
        if not np.isfinite(direction).all() or float(ev.gradient @ direction) >= 0.0:
            direction = -ev.gradient

        hit = _armijo(objective.value, x, f, ev.gradient, direction, trace)
        if hit is None:
            trace.reason = "line_search_failed"
            return x, trace
        x_new, f_new, step = hit
        ev = objective.gn_eval(x_new)
        trace.n_evals += 1
        gnorm = float(np.linalg.norm(ev.gradient))
        trace.objectives.append(f_new)
        trace.grad_norms.append(gnorm)
        trace.step_lengths.append(step)
        reason = _check_stop(rules, k, f, f_new, gnorm, gnorm0, x_new, x_new - x)
        x, f = x_new, f_new
        if reason:
            trace.reason = reason
            return x, trace
    trace.reason = "max_iterations"
    return x, trace


def lbfgs(objective, x0, memory: int = 10, rules: StopRules = StopRules()):
    """Two-loop-recursion L-BFGS with Armijo backtracking. Returns (x, OptTrace).

    Curvature pairs with ``s.y <= 1e-10 |s||y|`` are skipped; the inverse
    Hessian seed is ``(s.y / y.y) I`` from the newest kept pair. The search
    direction is reset to steepest descent if it ever fails the descent test.
    """
    if memory < 1:
        raise InvalidInputError("memory must be >= 1")
    objective = _as_objective(objective)
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    trace = OptTrace()
    f, g = objective.value_grad(x)
    trace.n_evals += 1
    gnorm0 = float(np.linalg.norm(g))
    trace.objectives.append(f)
    trace.grad_norms.append(gnorm0)
    if gnorm0 <= GRAD_ABS_FLOOR:
        trace.reason = "grad_tol"
        return x, trace

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []

    for k in range(rules.max_iterations):
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if rho_hist:
            s, y = s_hist[-1], y_hist[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        direction = -q
        if float(g @ direction) >= 0.0:
            direction = -g

        hit = _armijo(objective.value, x, f, g, direction, trace, extend=True)
        if hit is None:
            trace.reason = "line_search_failed"
            return x, trace
        x_new, f_new, step = hit
        f_new, g_new = objective.value_grad(x_new)
        trace.n_evals += 1

        s_vec = x_new - x
        y_vec = g_new - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-10 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)

        gnorm = float(np.linalg.norm(g_new))
        trace.objectives.append(f_new)
        trace.grad_norms.append(gnorm)
        trace.step_lengths.append(step)
        reason = _check_stop(rules, k, f, f_new, gnorm, gnorm0, x_new, s_vec)
        x, f, g = x_new, f_new, g_new
        if reason:
            trace.reason = reason
            return x, trace
    trace.reason = "max_iterations"
    return x, trace
