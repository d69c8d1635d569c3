"""Discrete adjoint of EPIRK-W integration.

The backward sweep transposes each forward step exactly, treating ``T_n`` as
a fixed matrix (the W-method view; no Hessian terms enter). For one step with
cotangent ``lam`` of ``y_{n+1}``:

* ``Dbar_j = h B_j^T lam + sum_{m >= j} h A_{m,j}^T Lam_m`` is the cotangent of
  the forward difference ``D_j``,
* ``Lam_i = (J(Y_i) - T)^T sum_{j > i} C(j-1-i, j) Dbar_j`` for
  ``i = s-1, ..., 1`` (back-substitution, no linear solve),
* ``lam_n = lam + sum_i Lam_i + J(y_n)^T (Fbar - wbar) + T^T wbar + forcing``,
  with ``Fbar = h B_1^T lam + sum_m h A_{m,1}^T Lam_m`` and
  ``wbar = sum_j (-1)^j Dbar_j``.

Every transposed matrix function is evaluated as ``psi(scale T^T) v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .integrator import OdeModel, StepRecord, StepTape
from .matfun import KrylovConfig, KrylovError, psi_products
from .tableau import Tableau, fd_coefficient


@dataclass
class AdjointSeed:
    """Terminal cotangent and per-step forcings ``dq_n/dy_n``."""

    terminal: np.ndarray
    forcings: dict = field(default_factory=dict)

    def forcing(self, n: int, dim: int):
        v = self.forcings.get(n)
        if v is None:
            return None
        v = np.asarray(v, dtype=float)
        if v.shape != (dim,):
            raise ValueError(f"forcing at step {n} has shape {v.shape}, expected ({dim},)")
        return v


@dataclass
class AdjointResult:
    lambda0: np.ndarray
    stage_multipliers_last: list | None = None
    lambdas: list | None = None  # [lambda_0, ..., lambda_N] when requested


class StageMultipliers(list):
    """``[Lam_1, ..., Lam_{s-1}]`` plus the cotangents the step update reuses."""

    f_bar: np.ndarray
    delta_bar: dict


def adjoint_stages(model: OdeModel, record: StepRecord, tableau: Tableau, lambda_next,
                   cfg: KrylovConfig = KrylovConfig()) -> StageMultipliers:
    """Stage multipliers ``Lam_1, ..., Lam_{s-1}`` of one step, in stage order."""
    s, h = tableau.s, record.h
    if len(record.stages) != s - 1:
        raise ValueError(f"record has {len(record.stages)} stages, tableau needs {s - 1}")
    lam = np.asarray(lambda_next, dtype=float)
    AT = record.w.rmatvec
    f_bar = np.zeros_like(lam)
    dbar = {j: np.zeros_like(lam) for j in range(2, s + 1)}

    def pull(vec, i):
        """Transpose of stage ``i``'s psi products applied to its cotangent ``vec``."""
        nonlocal f_bar
        targets, terms = [], []
        for j in range(1, i + 1):
            c = tableau.weight(i, j)
            if c != 0.0:
                row, g = tableau.psi(i, j)
                targets.append((j, c))
                terms.append((row, g * h))
        if not terms:
            return
        try:
            prods = psi_products(terms, AT, vec, cfg)
        except KrylovError as exc:
            raise KrylovError(f"adjoint stage {i} (t = {record.t_n:.6g}): {exc}") from None
        for (j, c), prod in zip(targets, prods):
            if j == 1:
                f_bar = f_bar + (c * h) * prod
            else:
                dbar[j] += (c * h) * prod

    pull(lam, s)
    Lam = [None] * s
    for i in range(s - 1, 0, -1):
        rbar = np.zeros_like(lam)
        for j in range(i + 1, s + 1):
            rbar += fd_coefficient(j - 1 - i, j) * dbar[j]
        Lam[i] = model.jac_T_vec(record.stages[i - 1], rbar) - AT(rbar)
        pull(Lam[i], i)
    out = StageMultipliers(Lam[1:])
    out.f_bar = f_bar
    out.delta_bar = dbar
    return out


def adjoint_step(model: OdeModel, record: StepRecord, tableau: Tableau, lambda_next,
                 Lam: list | None = None, forcing=None,
                 cfg: KrylovConfig = KrylovConfig()) -> np.ndarray:
    """``lambda_n`` from ``lambda_{n+1}`` and the step's stage multipliers."""
    lam = np.asarray(lambda_next, dtype=float)
    if not isinstance(Lam, StageMultipliers):
        Lam = adjoint_stages(model, record, tableau, lam, cfg)
    s = tableau.s
    wbar = np.zeros_like(lam)
    for j in range(2, s + 1):
        # sum_{l=0..j-2} C(l, j) = -C(j-1, j) = (-1)^j
        wbar += (-1) ** j * Lam.delta_bar[j]
    out = lam + model.jac_T_vec(record.y_n, Lam.f_bar - wbar) + record.w.rmatvec(wbar)
    for L in Lam:
        out = out + L
    if forcing is not None:
        out = out + forcing
    return out


def adjoint_sweep(tape: StepTape, seed: AdjointSeed, cfg: KrylovConfig = KrylovConfig(),
                  keep_trajectory: bool = False) -> AdjointResult:
    """Run the backward sweep from ``t_F`` to ``t_0``.

    ``seed.terminal`` is ``lambda_N``; a forcing stored at index ``N`` is
    added to it. Forcings at ``n < N`` are added to ``lambda_n``.
    """
    model, tableau = tape.model, tape.tableau
    dim = model.dim
    lam = np.array(seed.terminal, dtype=float)
    if lam.shape != (dim,):
        raise ValueError(f"terminal seed has shape {lam.shape}, model dim is {dim}")
    bad = [n for n in seed.forcings if not 0 <= n <= tape.N]
    if bad:
        raise ValueError(f"forcings at steps {bad} outside 0..{tape.N}")
    fN = seed.forcing(tape.N, dim)
    if fN is not None:
        lam = lam + fN
    lambdas = [lam] if keep_trajectory else None
    Lam = None
    for n in range(tape.N - 1, -1, -1):
        rec = tape.records[n]
        Lam = adjoint_stages(model, rec, tableau, lam, cfg)
        lam = adjoint_step(model, rec, tableau, lam, Lam, seed.forcing(n, dim), cfg)
        if keep_trajectory:
            lambdas.append(lam)
    if keep_trajectory:
        lambdas.reverse()
    last = [np.array(L) for L in Lam] if Lam is not None else None
    return AdjointResult(lambda0=lam, stage_multipliers_last=last, lambdas=lambdas)


def parameter_gradient(tape: StepTape, seed: AdjointSeed, augmented: bool,
                       cfg: KrylovConfig = KrylovConfig()) -> np.ndarray:
    """Gradient of the discrete cost with respect to the estimated quantity.

    Initial-condition estimation returns ``lambda_0``. For a model augmented
    with constant parameters the parameter block of ``lambda_0`` is returned;
    the augmentation routes every ``df/dtheta`` contribution through it.
    """
    n_params = getattr(tape.model, "n_params", None)
    if augmented and n_params is None:
        raise ValueError("augmented gradient requested but the model carries no parameters")
    if not augmented and n_params:
        raise ValueError("model is augmented with parameters; pass augmented=True")
    lam0 = adjoint_sweep(tape, seed, cfg).lambda0
    if augmented:
        return lam0[tape.model.dim - n_params:]
    return lam0
