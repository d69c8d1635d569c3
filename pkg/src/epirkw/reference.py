"""High-accuracy reference solutions from an embedded Runge-Kutta pair.

Forward references integrate ``y' = f(y)`` with scipy's DOP853. Adjoint
references integrate the continuous adjoint ``lambda' = -J(y)^T lambda``
backward in time together with the state, starting from the reference final
state, so both columns of a convergence study share one high-accuracy path.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp

from .integrator import OdeModel


class ReferenceError(RuntimeError):
    """The reference integrator did not reach the end of the window."""


def _solve(rhs, t_span, x0, rtol, atol):
    sol = solve_ivp(lambda t, x: rhs(x), t_span, np.asarray(x0, dtype=float),
                    method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise ReferenceError(f"reference solve over {t_span} failed: {sol.message}")
    return sol.y[:, -1]


def reference_solution(model: OdeModel, y0, t0: float, tF: float,
                       rtol: float = 1e-12, atol: float = 1e-12) -> np.ndarray:
    """State at ``tF`` of ``y' = f(y)``, ``y(t0) = y0``."""
    return _solve(model.f, (t0, tF), y0, rtol, atol)


def reference_adjoint(model: OdeModel, y0, t0: float, tF: float, lambda_F,
                      rtol: float = 1e-12, atol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Continuous adjoint at ``t0`` for the terminal value ``lambda_F``.

    Returns ``(lambda_0, y_F)`` where ``lambda_0 = (dy_F / dy_0)^T lambda_F``.
    """
    y0 = np.asarray(y0, dtype=float)
    n = y0.size
    yF = reference_solution(model, y0, t0, tF, rtol, atol)

    def rhs(x):
        y, lam = x[:n], x[n:]
        return np.concatenate([model.f(y), -model.jac_T_vec(y, lam)])

    x0 = _solve(rhs, (tF, t0), np.concatenate([yF, np.asarray(lambda_F, dtype=float)]), rtol, atol)
    return x0[n:], yF


def fitted_slope(h, err) -> float:
    """Least-squares slope of ``log err`` against ``log h``; ``nan`` if undefined."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    ok = (err > 0) & np.isfinite(err)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(h[ok]), np.log(err[ok]), 1)[0])
