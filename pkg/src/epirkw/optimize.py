"""Limited-memory BFGS with a strong-Wolfe line search and simple box constraints.

Bounds are handled by projecting the gradient and freezing components that
sit on a face with the gradient pushing outward; the search direction is
zero on those components and the step is capped at the nearest face.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for :func:`minimize`.

    ``cost_rel_tol`` stops when an accepted step changes the cost by less than
    this fraction of its magnitude (0 disables the test). ``bounds`` is an
    ``(n, 2)`` array of ``[lo, hi]`` rows; use ``-inf``/``inf`` for open sides.
    """

    memory: int = 10
    max_iters: int = 100
    grad_tol: float = 1e-5
    cost_rel_tol: float = 0.0
    bounds: np.ndarray | None = None
    c1: float = 1e-4
    c2: float = 0.9
    max_trials: int = 30

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError(f"memory must be >= 1, got {self.memory}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.bounds is not None:
            b = np.asarray(self.bounds, dtype=float)
            if b.ndim != 2 or b.shape[1] != 2:
                raise ValueError(f"bounds must have shape (n, 2), got {b.shape}")
            if np.any(b[:, 0] > b[:, 1]):
                raise ValueError("bounds: lo > hi")


@dataclass
class OptimizerTrace:
    """One row per accepted iterate, iteration 0 being the start point."""

    iteration: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    grad_inf: list = field(default_factory=list)
    x: list = field(default_factory=list)
    n_cost_evals: list = field(default_factory=list)
    n_grad_evals: list = field(default_factory=list)
    status: str = ""

    @property
    def n_iters(self) -> int:
        return len(self.iteration) - 1

    def append(self, it, f, ginf, x, nc, ng):
        self.iteration.append(it)
        self.cost.append(float(f))
        self.grad_inf.append(float(ginf))
        self.x.append(np.array(x, dtype=float))
        self.n_cost_evals.append(nc)
        self.n_grad_evals.append(ng)


class _Counted:
    def __init__(self, cost_fn, grad_fn):
        self.cost_fn, self.grad_fn = cost_fn, grad_fn
        self.nc = self.ng = 0

    def cost(self, x):
        self.nc += 1
        return float(self.cost_fn(x))

    def grad(self, x):
        self.ng += 1
        return np.asarray(self.grad_fn(x), dtype=float)


def _safe_cost(fun: _Counted, x) -> float:
    """Cost at a trial point; a failing evaluation counts as an infinite cost."""
    try:
        f = fun.cost(x)
    except (ArithmeticError, FloatingPointError, OverflowError, np.linalg.LinAlgError):
        return math.inf
    return f if math.isfinite(f) else math.inf


def projected_gradient(x, g, lo, hi):
    pg = g.copy()
    pg[(x <= lo) & (g > 0)] = 0.0
    pg[(x >= hi) & (g < 0)] = 0.0
    return pg


def _two_loop(g, pairs, free):
    q = np.where(free, g, 0.0)
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s[free] @ q[free])
        q[free] -= a * y[free]
        alphas.append(a)
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y[free] @ q[free])
        q[free] += (a - b) * s[free]
    q[~free] = 0.0
    return -q


def _interpolate(a_lo, f_lo, g_lo, a_hi, f_hi):
    """Minimizer of the quadratic through ``(a_lo, f_lo, g_lo)`` and ``(a_hi, f_hi)``,
    kept inside the middle 80% of the bracket."""
    da = a_hi - a_lo
    denom = 2.0 * (f_hi - f_lo - g_lo * da)
    a = a_lo - g_lo * da * da / denom if denom > 0 else 0.5 * (a_lo + a_hi)
    lo, hi = sorted((a_lo + 0.1 * da, a_hi - 0.1 * da))
    return min(max(a, lo), hi) if math.isfinite(a) else 0.5 * (a_lo + a_hi)


def _line_search(fun, x, d, f0, g0, alpha0, alpha_max, cfg, lo, hi):
    """Strong-Wolfe search along ``d``; returns ``(alpha, f, g)`` or ``None``."""
    dphi0 = float(g0 @ d)
    point = lambda a: np.clip(x + a * d, lo, hi)

    def zoom(a_lo, f_lo, gd_lo, g_lo, a_hi, f_hi):
        for _ in range(cfg.max_trials):
            if abs(a_hi - a_lo) <= 1e-14 * max(1.0, abs(a_lo)):
                break
            a = _interpolate(a_lo, f_lo, gd_lo, a_hi, f_hi)
            fa = _safe_cost(fun, point(a))
            if fa > f0 + cfg.c1 * a * dphi0 or fa >= f_lo:
                a_hi, f_hi = a, fa
                continue
            ga = fun.grad(point(a))
            gd = float(ga @ d)
            if abs(gd) <= -cfg.c2 * dphi0:
                return a, fa, ga
            if gd * (a_hi - a_lo) >= 0:
                a_hi, f_hi = a_lo, f_lo
            a_lo, f_lo, gd_lo, g_lo = a, fa, gd, ga
        if a_lo > 0:
            return a_lo, f_lo, g_lo
        return None

    a_prev, f_prev, gd_prev, g_prev = 0.0, f0, dphi0, g0
    a = min(alpha0, alpha_max)
    for i in range(cfg.max_trials):
        fa = _safe_cost(fun, point(a))
        if fa > f0 + cfg.c1 * a * dphi0 or (i > 0 and fa >= f_prev):
            return zoom(a_prev, f_prev, gd_prev, g_prev, a, fa)
        ga = fun.grad(point(a))
        gd = float(ga @ d)
        if abs(gd) <= -cfg.c2 * dphi0:
            return a, fa, ga
        if gd >= 0:
            return zoom(a, fa, gd, ga, a_prev, f_prev)
        if a >= alpha_max:
            return a, fa, ga  # sufficient decrease on the face of the box
        a_prev, f_prev, gd_prev, g_prev = a, fa, gd, ga
        a = min(2.0 * a, alpha_max)
    return None


def minimize(cost_fn: Callable, grad_fn: Callable, x0,
             cfg: OptimizerConfig = OptimizerConfig()):
    """Minimize ``cost_fn`` from ``x0``; returns ``(x_star, trace)``.

    ``trace.status`` is one of ``"grad_tol"``, ``"cost_rel_tol"``,
    ``"max_iters"`` or ``"line_search_failed"`` (the best point so far is
    returned). ``cost_fn`` and ``grad_fn`` are never called concurrently and
    ``grad_fn`` is always called at a point whose cost was just evaluated.
    """
    x = np.array(x0, dtype=float)
    n = x.size
    if cfg.bounds is None:
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    else:
        b = np.asarray(cfg.bounds, dtype=float)
        if b.shape != (n, 2):
            raise ValueError(f"bounds have shape {b.shape}, expected ({n}, 2)")
        lo, hi = b[:, 0], b[:, 1]
    x = np.clip(x, lo, hi)
    fun = _Counted(cost_fn, grad_fn)
    f = fun.cost(x)
    if not math.isfinite(f):
        raise FloatingPointError("cost is not finite at the start point")
    g = fun.grad(x)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("gradient is not finite at the start point")
    pairs: deque = deque(maxlen=cfg.memory)
    trace = OptimizerTrace()
    pg = projected_gradient(x, g, lo, hi)
    trace.append(0, f, np.abs(pg).max(initial=0.0), x, fun.nc, fun.ng)

    for it in range(1, cfg.max_iters + 1):
        if np.abs(pg).max(initial=0.0) <= cfg.grad_tol:
            trace.status = "grad_tol"
            return x, trace
        free = pg != 0.0
        d = _two_loop(g, list(pairs), free)
        if not float(g @ d) < 0:
            pairs.clear()
            d = -pg
        assert float(g @ d) < 0, "search direction is not a descent direction"
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(d > 0, (hi - x) / d, np.where(d < 0, (lo - x) / d, np.inf))
        alpha_max = float(room.min(initial=np.inf))
        alpha0 = 1.0 if pairs else min(1.0, 1.0 / np.abs(d).max())
        found = _line_search(fun, x, d, f, g, alpha0, alpha_max, cfg, lo, hi)
        if found is None:
            trace.status = "line_search_failed"
            return x, trace
        a, f_new, g_new = found
        x_new = np.clip(x + a * d, lo, hi)
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        f_old = f
        x, f, g = x_new, f_new, g_new
        pg = projected_gradient(x, g, lo, hi)
        trace.append(it, f, np.abs(pg).max(initial=0.0), x, fun.nc, fun.ng)
        if cfg.cost_rel_tol > 0 and abs(f_old - f) <= cfg.cost_rel_tol * max(abs(f_old), abs(f), 1e-300):
            trace.status = "cost_rel_tol"
            return x, trace
    trace.status = "grad_tol" if np.abs(pg).max(initial=0.0) <= cfg.grad_tol else "max_iters"
    return x, trace
