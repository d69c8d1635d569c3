"""Fixed-step EPIRK-W integration with a full checkpoint tape.

One step of an ``s``-stage method with Jacobian approximation ``T``::

    Y_i     = y + a_i1 psi_i1(g_i1 h T) h f(y) + sum_{j=2..i} a_ij psi_ij(g_ij h T) h D_j,  i < s
    y_next  = y + b_1 psi_s1(g_s1 h T) h f(y) + sum_{j=2..s} b_j psi_sj(g_sj h T) h D_j

with remainder ``r(Y) = f(Y) - f(y) - T (Y - y)`` and forward differences
``D_j = sum_{l=0..j-1} C(l, j) r(Y_{j-1-l})`` (``Y_0 = y``, so ``r(Y_0) = 0``).
"""

from __future__ import annotations

import copy
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .matfun import KrylovConfig, KrylovError, psi_products
from .tableau import Tableau, fd_coefficient


# --------------------------------------------------------------------------
# Jacobian approximations T_n
# --------------------------------------------------------------------------

class WOperator(ABC):
    """Action of ``T`` and ``T^T`` on vectors."""

    @abstractmethod
    def matvec(self, v: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def rmatvec(self, v: np.ndarray) -> np.ndarray: ...


class JacobianOperator(WOperator):
    """Exact Jacobian of ``model`` frozen at state ``y``."""

    def __init__(self, model: "OdeModel", y: np.ndarray):
        self.model = model
        self.y = np.array(y, dtype=float)

    def matvec(self, v):
        return self.model.jac_vec(self.y, v)

    def rmatvec(self, v):
        return self.model.jac_T_vec(self.y, v)


class MatrixOperator(WOperator):
    """Explicit dense matrix."""

    def __init__(self, T):
        self.T = np.array(T, dtype=float)
        if self.T.ndim != 2 or self.T.shape[0] != self.T.shape[1]:
            raise ValueError(f"MatrixOperator needs a square matrix, got {self.T.shape}")

    def matvec(self, v):
        return self.T @ v

    def rmatvec(self, v):
        return self.T.T @ v


class ShiftedOperator(WOperator):
    """``base + E`` for a dense perturbation ``E``."""

    def __init__(self, base: WOperator, E):
        self.base = base
        self.E = np.asarray(E, dtype=float)

    def matvec(self, v):
        return self.base.matvec(v) + self.E @ v

    def rmatvec(self, v):
        return self.base.rmatvec(v) + self.E.T @ v


class WPolicy(ABC):
    """Chooses ``T_n`` for step ``n`` starting at time ``t`` from state ``y``."""

    @abstractmethod
    def build(self, model: "OdeModel", y: np.ndarray, t: float, n: int) -> WOperator: ...


class ExactJacobian(WPolicy):
    """``T_n = J(y_n)``."""

    def build(self, model, y, t, n):
        return model.jacobian_operator(y)


class PerturbedJacobian(WPolicy):
    """``T_n = J(y_n) + E`` with a fixed matrix ``E``."""

    def __init__(self, E):
        self.E = np.array(E, dtype=float)

    def build(self, model, y, t, n):
        return ShiftedOperator(model.jacobian_operator(y), self.E)


class FixedMatrix(WPolicy):
    """The same matrix ``T`` for every step."""

    def __init__(self, T):
        self.op = MatrixOperator(T)

    def build(self, model, y, t, n):
        return self.op


class JacobianAlong(WPolicy):
    """``T_n = J(z_n)`` along a prescribed state sequence ``z_0, z_1, ...``.

    ``T_n`` then no longer depends on the integrated state, which makes the
    discrete map and its adjoint consistent to roundoff.
    """

    def __init__(self, states: Sequence[np.ndarray]):
        self.states = [np.array(z, dtype=float) for z in states]

    def build(self, model, y, t, n):
        return model.jacobian_operator(self.states[n])


class Prescribed(WPolicy):
    """Replays a given list of operators, one per step."""

    def __init__(self, ops: Sequence[WOperator]):
        self.ops = list(ops)

    def build(self, model, y, t, n):
        return self.ops[n]


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------

class OdeModel(ABC):
    """Autonomous system ``y' = f(y)`` with Jacobian actions.

    Subclasses set ``dim`` and implement ``f``, ``jac_vec`` and ``jac_T_vec``.
    ``w_policy`` selects ``T_n``; it defaults to the exact Jacobian.
    """

    dim: int
    w_policy: WPolicy = ExactJacobian()

    @abstractmethod
    def f(self, y: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def jac_vec(self, y: np.ndarray, v: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def jac_T_vec(self, y: np.ndarray, v: np.ndarray) -> np.ndarray: ...

    def jacobian_operator(self, y: np.ndarray) -> WOperator:
        """``J(y)`` as an operator; models may precompute coefficients here."""
        return JacobianOperator(self, y)

    def w_matrix(self, y: np.ndarray, t: float = 0.0, n: int = 0) -> WOperator:
        return self.w_policy.build(self, y, t, n)

    def with_w_policy(self, policy: WPolicy) -> "OdeModel":
        """Shallow copy of the model using ``policy`` for ``T_n``."""
        other = copy.copy(self)
        other.w_policy = policy
        return other

    def jacobian(self, y: np.ndarray) -> np.ndarray:
        """Dense Jacobian assembled column by column (small systems and tests)."""
        y = np.asarray(y, dtype=float)
        eye = np.eye(self.dim)
        return np.column_stack([self.jac_vec(y, e) for e in eye])


# --------------------------------------------------------------------------
# Step records
# --------------------------------------------------------------------------

@dataclass
class StepRecord:
    """Everything the backward sweep needs from one forward step."""

    y_n: np.ndarray
    stages: list
    h: float
    t_n: float
    w: WOperator

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"step size must be positive, got {self.h}")


@dataclass
class StepTape:
    """Forward trajectory with one record per step."""

    model: OdeModel
    tableau: Tableau
    records: list = field(default_factory=list)
    y_final: np.ndarray | None = None
    t0: float = 0.0
    tF: float = 0.0

    @property
    def N(self) -> int:
        return len(self.records)

    @property
    def states(self) -> list:
        """``[y_0, ..., y_N]``."""
        return [r.y_n for r in self.records] + [self.y_final]

    @property
    def operators(self) -> list:
        return [r.w for r in self.records]


# --------------------------------------------------------------------------
# Stepping
# --------------------------------------------------------------------------

def remainder(model: OdeModel, w: WOperator, y_n, Y, f_n=None) -> np.ndarray:
    """``f(Y) - f(y_n) - T (Y - y_n)``; ``f_n`` may pass a cached ``f(y_n)``."""
    y_n = np.asarray(y_n, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != y_n.shape:
        raise ValueError(f"remainder: shapes {Y.shape} and {y_n.shape} differ")
    if f_n is None:
        f_n = model.f(y_n)
    return model.f(Y) - f_n - w.matvec(Y - y_n)


def forward_difference(R: Sequence[np.ndarray], j: int) -> np.ndarray:
    """``D_j = sum_{l=0..j-2} C(l, j) R[j-1-l]`` from remainders ``R[1..j-1]``.

    ``R[0]`` belongs to ``Y_0 = y_n`` and vanishes, so ``l = j-1`` is skipped.
    """
    if len(R) < j:
        raise AssertionError(f"forward difference D_{j} needs stages up to {j - 1}")
    out = fd_coefficient(0, j) * R[j - 1]
    for l in range(1, j - 1):
        out = out + fd_coefficient(l, j) * R[j - 1 - l]
    return out


def epirkw_step(model: OdeModel, tableau: Tableau, y_n, h: float,
                cfg: KrylovConfig = KrylovConfig(), w: WOperator | None = None,
                t_n: float = 0.0, n: int = 0):
    """Advance one step; returns ``(y_next, [Y_1, ..., Y_{s-1}])``.

    ``w`` overrides ``model.w_matrix(y_n, t_n, n)`` as ``T_n``.
    """
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    y_n = np.asarray(y_n, dtype=float)
    s = tableau.s
    if w is None:
        w = model.w_matrix(y_n, t_n, n)
    A = w.matvec
    f_n = model.f(y_n)

    # acc[i] collects the increments of stage i (1-based, i = s is the new state)
    acc = [None] + [np.zeros_like(y_n) for _ in range(s)]

    def spread(vec, j):
        """Add ``weight(i, j) psi_ij(g_ij h T) h vec`` to every stage ``i >= j``."""
        targets, terms = [], []
        for i in range(max(j, 1), s + 1):
            c = tableau.weight(i, j)
            if c != 0.0:
                row, g = tableau.psi(i, j)
                targets.append((i, c))
                terms.append((row, g * h))
        if not terms:
            return
        for (i, c), prod in zip(targets, psi_products(terms, A, vec, cfg)):
            acc[i] += (c * h) * prod

    stages = []
    R = [np.zeros_like(y_n)]
    spread(f_n, 1)
    for i in range(1, s):
        Y = y_n + acc[i]
        stages.append(Y)
        R.append(remainder(model, w, y_n, Y, f_n))
        spread(forward_difference(R, i + 1), i + 1)
    return y_n + acc[s], stages


def integrate(model: OdeModel, tableau: Tableau, y0, t0: float, tF: float, N: int,
              cfg: KrylovConfig = KrylovConfig()) -> StepTape:
    """Integrate ``N`` equal steps from ``t0`` to ``tF`` and record them."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not tF > t0:
        raise ValueError(f"need tF > t0, got [{t0}, {tF}]")
    y = np.array(y0, dtype=float)
    if y.shape != (model.dim,):
        raise ValueError(f"initial state has shape {y.shape}, model dim is {model.dim}")
    h = (tF - t0) / N
    tape = StepTape(model=model, tableau=tableau, t0=t0, tF=tF)
    for n in range(N):
        t = t0 + n * h
        w = model.w_matrix(y, t, n)
        try:
            y_next, stages = epirkw_step(model, tableau, y, h, cfg, w=w, t_n=t, n=n)
        except KrylovError as exc:
            raise KrylovError(f"step {n} (t = {t:.6g}): {exc}") from None
        if not np.all(np.isfinite(y_next)):
            raise FloatingPointError(f"step {n} (t = {t:.6g}): non-finite state")
        tape.records.append(StepRecord(y_n=y, stages=stages, h=h, t_n=t, w=w))
        y = y_next
    tape.y_final = y
    return tape
