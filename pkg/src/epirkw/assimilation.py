"""Strong-constraint 4D-Var problems and twin-experiment synthesis.

The cost of an estimate ``theta`` (initial state, or constant model
parameters carried as extra state components) is::

    Phi(theta) = 1/2 |theta - theta_b|^2_{B^-1} + 1/2 sum_i |H(y_{j_i}) - z_i|^2_{R_i^-1}

and its gradient comes from one backward sweep of the discrete adjoint with
forcings ``(dH/dy)^T R_i^-1 (H(y_{j_i}) - z_i)`` injected at the observation steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .adjoint import AdjointSeed, adjoint_sweep, parameter_gradient
from .integrator import JacobianAlong, OdeModel, StepTape, WOperator, integrate
from .matfun import KrylovConfig
from .observation import LinearObservation, ObservationOperator, RhsFunctional
from .tableau import Tableau


class CovarianceError(ValueError):
    """Covariance matrix is not symmetric positive definite."""


class CovarianceModel:
    """SPD covariance with its lower Cholesky factor.

    ``kind`` is ``"background"`` or ``"observation"``. Diagonal matrices
    keep only their diagonal.
    """

    def __init__(self, matrix, kind: str = "background"):
        if kind not in ("background", "observation"):
            raise ValueError(f"kind must be 'background' or 'observation', got {kind!r}")
        self.kind = kind
        M = np.array(matrix, dtype=float)
        if M.ndim == 1:
            if np.any(M <= 0) or not np.all(np.isfinite(M)):
                raise CovarianceError("diagonal covariance needs positive finite entries")
            self.diag = M
            self.chol_diag = np.sqrt(M)
            self._chol = None
            self.dim = M.size
            return
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise CovarianceError(f"covariance must be square, got shape {M.shape}")
        scale = max(np.abs(M).max(), 1e-300)
        if np.abs(M - M.T).max() > 1e-12 * scale:
            raise CovarianceError("covariance is not symmetric")
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise CovarianceError("Cholesky factorization failed (matrix not positive definite)") from None
        self.diag = None
        self._matrix = M
        self._chol = L
        self.dim = M.shape[0]

    @classmethod
    def diagonal(cls, sigma, kind: str = "observation") -> "CovarianceModel":
        return cls(np.asarray(sigma, dtype=float) ** 2, kind)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diag) if self.diag is not None else self._matrix

    @property
    def chol(self) -> np.ndarray:
        return np.diag(self.chol_diag) if self.diag is not None else self._chol

    def solve(self, v) -> np.ndarray:
        """``C^{-1} v`` through the Cholesky factor."""
        v = np.asarray(v, dtype=float)
        if self.diag is not None:
            return v / self.diag
        return cho_solve((self._chol, True), v)

    def norm2(self, v) -> float:
        """``v^T C^{-1} v``."""
        v = np.asarray(v, dtype=float)
        return float(v @ self.solve(v))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Zero-mean draw ``L xi`` with standard normal ``xi``."""
        xi = rng.standard_normal(self.dim)
        if self.diag is not None:
            return self.chol_diag * xi
        return self._chol @ xi


def lorenz_background_covariance(sigma, alpha: float = 0.1, L: float = 4.0,
                                 K: int | None = None) -> CovarianceModel:
    """``B = alpha I + (1 - alpha) (sigma sigma^T) * exp(-D^2 / L^2)`` on a ring.

    ``D_ij = min(|i - j|, K - |i - j|)``.
    """
    sigma = np.asarray(sigma, dtype=float).ravel()
    K = sigma.size if K is None else int(K)
    if K < 2 or sigma.size != K:
        raise ValueError(f"need K >= 2 and len(sigma) == K, got K={K}, len={sigma.size}")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if not L > 0:
        raise ValueError(f"L must be positive, got {L}")
    idx = np.arange(K)
    d = np.abs(idx[:, None] - idx[None, :])
    D = np.minimum(d, K - d)
    B = alpha * np.eye(K) + (1 - alpha) * np.outer(sigma, sigma) * np.exp(-(D / L) ** 2)
    return CovarianceModel(B, "background")


# --------------------------------------------------------------------------
# State augmentation
# --------------------------------------------------------------------------

class AugmentedModel(OdeModel):
    """``[y; tau]' = [f(y, tau); 0]`` for ``P`` constant parameters ``tau``."""

    def __init__(self, state_dim: int, P: int, f_theta: Callable, jac_y: Callable,
                 jac_y_T: Callable, jac_theta: Callable | None, jac_theta_T: Callable | None,
                 linearize: Callable | None = None):
        if P > 0 and (jac_theta is None or jac_theta_T is None):
            raise ValueError("parameter blocks d f / d theta and its transpose are required")
        self.state_dim = int(state_dim)
        self.n_params = int(P)
        self.dim = self.state_dim + self.n_params
        self._f, self._jy, self._jyT = f_theta, jac_y, jac_y_T
        self._jt, self._jtT = jac_theta, jac_theta_T
        self._linearize = linearize

    def split(self, y):
        y = np.asarray(y, dtype=float)
        return y[:self.state_dim], y[self.state_dim:]

    def _check(self, out, n, what):
        out = np.asarray(out, dtype=float)
        if out.shape != (n,):
            raise ValueError(f"{what} returned shape {out.shape}, expected ({n},)")
        return out

    def f(self, y):
        x, tau = self.split(y)
        out = np.zeros(self.dim)
        out[:self.state_dim] = self._check(self._f(x, tau), self.state_dim, "f")
        return out

    def jac_vec(self, y, v):
        x, tau = self.split(y)
        vx, vt = self.split(v)
        out = np.zeros(self.dim)
        top = self._jy(x, tau, vx)
        if self.n_params:
            top = top + self._jt(x, tau, vt)
        out[:self.state_dim] = self._check(top, self.state_dim, "jac_vec")
        return out

    def jac_T_vec(self, y, w):
        x, tau = self.split(y)
        wx = np.asarray(w, dtype=float)[:self.state_dim]
        out = np.empty(self.dim)
        out[:self.state_dim] = self._check(self._jyT(x, tau, wx), self.state_dim, "jac_T_vec")
        if self.n_params:
            out[self.state_dim:] = self._check(self._jtT(x, tau, wx), self.n_params,
                                               "parameter transpose block")
        return out

    def jacobian_operator(self, y):
        if self._linearize is None:
            return super().jacobian_operator(y)
        x, tau = self.split(y)
        return _AugmentedJacobian(self, self._linearize(x, tau))

    def augment_state(self, x, tau) -> np.ndarray:
        return np.concatenate([np.asarray(x, dtype=float), np.asarray(tau, dtype=float)])


class _AugmentedJacobian(WOperator):
    """Block Jacobian ``[[J_y, J_theta], [0, 0]]`` from a precomputed linearization."""

    def __init__(self, model: AugmentedModel, lin):
        self.model, self.lin = model, lin

    def matvec(self, v):
        k = self.model.state_dim
        out = np.zeros(self.model.dim)
        out[:k] = self.lin.jv(v[:k]) + self.lin.dtheta_v(v[k:])
        return out

    def rmatvec(self, w):
        k = self.model.state_dim
        out = np.empty(self.model.dim)
        out[:k] = self.lin.jtv(w[:k])
        out[k:] = self.lin.dtheta_T_v(w[:k])
        return out


def augment_model(model, P: int, f_theta: Callable | None = None, jac_y: Callable | None = None,
                  jac_y_T: Callable | None = None, jac_theta: Callable | None = None,
                  jac_theta_T: Callable | None = None) -> AugmentedModel:
    """Append ``P`` constant parameters to the state of ``model``.

    Callables take ``(y, theta)`` or ``(y, theta, v)``. Missing ones default
    to the model's ``rhs``, ``jv``, ``jtv``, ``dfdtheta_v`` and
    ``dfdtheta_T_v`` methods. With ``P = 0`` the plain ``f``, ``jac_vec`` and
    ``jac_T_vec`` of ``model`` are used. When all defaults are taken and the
    model offers ``linearize(y, theta)`` (an object with ``jv``, ``jtv``,
    ``dtheta_v`` and ``dtheta_T_v``), ``T_n`` reuses it across Krylov steps.
    """
    if P < 0:
        raise ValueError(f"P must be >= 0, got {P}")
    if P == 0:
        return AugmentedModel(model.dim, 0,
                              f_theta or (lambda y, th: model.f(y)),
                              jac_y or (lambda y, th, v: model.jac_vec(y, v)),
                              jac_y_T or (lambda y, th, v: model.jac_T_vec(y, v)),
                              None, None)
    defaults = not any((f_theta, jac_y, jac_y_T, jac_theta, jac_theta_T))
    return AugmentedModel(
        model.dim, P,
        f_theta or model.rhs,
        jac_y or model.jv,
        jac_y_T or model.jtv,
        jac_theta or model.dfdtheta_v,
        jac_theta_T or model.dfdtheta_T_v,
        linearize=getattr(model, "linearize", None) if defaults else None,
    )


# --------------------------------------------------------------------------
# Problem
# --------------------------------------------------------------------------

@dataclass
class Observation:
    """Measurement ``value`` of ``H(y_step)`` with error covariance ``R``."""

    step: int
    value: np.ndarray
    R: CovarianceModel


@dataclass
class FourDVarProblem:
    """Everything needed to evaluate the 4D-Var cost and its gradient.

    ``mode = "initial"`` estimates the initial state. ``mode = "parameters"``
    estimates the parameter block of an augmented model; the initial state is
    ``[y_ini, theta]``.

    ``linearization`` chooses ``T_n``: ``"state"`` keeps the model's own
    policy (``J(y_n)`` by default); ``"background"`` freezes ``T_n = J`` along
    the trajectory started from ``theta_b``, which makes the discrete map
    independent of how ``T_n`` was formed.
    """

    model: OdeModel
    tableau: Tableau
    H: ObservationOperator
    theta_b: np.ndarray
    B: CovarianceModel
    obs: list
    t0: float
    tF: float
    N: int
    mode: str = "initial"
    y_ini: np.ndarray | None = None
    cfg: KrylovConfig = field(default_factory=KrylovConfig)
    linearization: str = "state"

    def __post_init__(self):
        self.theta_b = np.array(self.theta_b, dtype=float)
        if self.mode not in ("initial", "parameters"):
            raise ValueError(f"mode must be 'initial' or 'parameters', got {self.mode!r}")
        if self.linearization not in ("state", "background"):
            raise ValueError(f"linearization must be 'state' or 'background', got {self.linearization!r}")
        n_params = getattr(self.model, "n_params", 0)
        if self.mode == "initial":
            if self.theta_b.size != self.model.dim:
                raise ValueError("initial-condition mode: theta_b must match the model dimension")
        else:
            if not n_params or self.theta_b.size != n_params:
                raise ValueError("parameter mode needs an augmented model whose parameter count matches theta_b")
            if self.y_ini is None:
                raise ValueError("parameter mode needs y_ini")
            self.y_ini = np.array(self.y_ini, dtype=float)
        if self.B.dim != self.theta_b.size:
            raise ValueError("B dimension does not match theta_b")
        for ob in self.obs:
            if not 0 <= ob.step <= self.N:
                raise ValueError(f"observation step {ob.step} outside 0..{self.N}")
        self._cache_key = None
        self._cache_tape = None
        self._dyn = self.model
        if self.linearization == "background":
            base = integrate(self.model, self.tableau, self.initial_state(self.theta_b),
                             self.t0, self.tF, self.N, self.cfg)
            self._dyn = self.model.with_w_policy(JacobianAlong(base.states[:-1]))
        self.n_forward = 0
        self.n_adjoint = 0

    @property
    def dynamics(self) -> OdeModel:
        """Model with the ``T_n`` policy actually used for integration."""
        return self._dyn

    def initial_state(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta_b.shape:
            raise ValueError(f"theta has shape {theta.shape}, expected {self.theta_b.shape}")
        if self.mode == "initial":
            return theta.copy()
        return np.concatenate([self.y_ini, theta])

    def forward(self, theta) -> StepTape:
        key = np.asarray(theta, dtype=float).tobytes()
        if key != self._cache_key:
            self._cache_tape = integrate(self._dyn, self.tableau, self.initial_state(theta),
                                         self.t0, self.tF, self.N, self.cfg)
            self._cache_key = key
            self.n_forward += 1
        return self._cache_tape

    def residuals(self, tape: StepTape) -> list:
        states = tape.states
        return [self.H.apply(states[ob.step]) - ob.value for ob in self.obs]

    def cost(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        tape = self.forward(theta)
        J = 0.5 * self.B.norm2(theta - self.theta_b)
        for ob, r in zip(self.obs, self.residuals(tape)):
            J += 0.5 * ob.R.norm2(r)
        return float(J)

    def adjoint_seed(self, tape: StepTape) -> AdjointSeed:
        """Observation forcings ``(dH/dy)^T R^-1 r`` at their steps."""
        states = tape.states
        forcings: dict = {}
        for ob, r in zip(self.obs, self.residuals(tape)):
            v = self.H.adjoint_apply(states[ob.step], ob.R.solve(r))
            forcings[ob.step] = forcings.get(ob.step, 0.0) + v
        return AdjointSeed(terminal=np.zeros(self.model.dim), forcings=forcings)

    def grad(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        tape = self.forward(theta)
        g = parameter_gradient(tape, self.adjoint_seed(tape), augmented=self.mode == "parameters",
                               cfg=self.cfg)
        self.n_adjoint += 1
        return self.B.solve(theta - self.theta_b) + g

    def adjoint_trajectory(self, theta) -> list:
        """Adjoint variables ``lambda_0 .. lambda_N`` of the observation term."""
        tape = self.forward(theta)
        res = adjoint_sweep(tape, self.adjoint_seed(tape), self.cfg, keep_trajectory=True)
        self.n_adjoint += 1
        return res.lambdas

    def trajectory_observations(self, theta) -> np.ndarray:
        """``H(y_{j_i})`` for every observation, stacked row-wise."""
        states = self.forward(theta).states
        return np.array([self.H.apply(states[ob.step]) for ob in self.obs])


def cost(problem: FourDVarProblem, theta) -> float:
    return problem.cost(theta)


def grad(problem: FourDVarProblem, theta) -> np.ndarray:
    return problem.grad(theta)


# --------------------------------------------------------------------------
# Finite-difference verification
# --------------------------------------------------------------------------

def fd_step(theta, i: int, rel_step: float = 1e-6) -> float:
    """Central-difference step ``rel_step (1 + |theta_i|)``."""
    return rel_step * (1.0 + abs(float(theta[i])))


def fd_component(cost_fn: Callable, theta, i: int, rel_step: float = 1e-6) -> float:
    """Central difference of ``cost_fn`` along coordinate ``i``.

    The divisor is the representable step ``theta_i^+ - theta_i^-``.
    """
    theta = np.asarray(theta, dtype=float)
    h = fd_step(theta, i, rel_step)
    tp, tm = theta.copy(), theta.copy()
    tp[i] += h
    tm[i] -= h
    return (cost_fn(tp) - cost_fn(tm)) / (tp[i] - tm[i])


def fd_gradient(cost_fn: Callable, theta, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time."""
    theta = np.asarray(theta, dtype=float)
    return np.array([fd_component(cost_fn, theta, i, rel_step) for i in range(theta.size)])


def gradient_rel_errors(g, g_fd, floor: float = 1e-8) -> np.ndarray:
    """Componentwise ``|g - g_fd| / max(|g_fd|, floor ||g_fd||_inf)``.

    The floor only matters for components many orders below the gradient
    scale, where a finite difference carries no significant digits.
    """
    g = np.asarray(g, dtype=float)
    g_fd = np.asarray(g_fd, dtype=float)
    scale = np.max(np.abs(g_fd)) if g_fd.size else 0.0
    den = np.maximum(np.abs(g_fd), floor * scale)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(g - g_fd) / den
    rel[(den == 0) & (g == g_fd)] = 0.0
    rel[(den == 0) & (g != g_fd)] = np.inf
    return rel


# --------------------------------------------------------------------------
# Twin experiments
# --------------------------------------------------------------------------

@dataclass
class LorenzProtocol:
    """Initial-condition estimation for Lorenz-96.

    The truth is spun up from ``1 + 0.1 mod(j, 5)`` over ``spin_steps``
    intervals of ``dt_spin``; observations of the 34-component operator are
    taken every ``obs_every`` steps of size ``dt``.
    """

    K: int = 40
    forcing: float = 8.0
    standard_form: bool = True
    dt_spin: float = 0.015
    spin_steps: int = 10
    t0: float = 0.0
    dt: float = 0.0003
    N: int = 1000
    obs_every: int = 100
    n_obs: int = 10
    sigma_b_rel: float = 0.03
    alpha: float = 0.1
    length_scale: float = 4.0
    sigma_obs_rel: float = 0.005
    sigma_obs_rule: str = "mean"
    linearization: str = "state"
    noise: bool = True
    seed: int = 0


@dataclass
class LinearProtocol:
    """Initial-condition estimation for ``y' = A y`` with full observations.

    ``A`` is a seeded random matrix shifted to have spectral abscissa
    ``-decay``. The truth is ``amplitude`` times a standard normal draw. The
    cost is exactly quadratic in the initial state.
    """

    dim: int = 6
    decay: float = 0.5
    amplitude: float = 0.1
    t0: float = 0.0
    tF: float = 1.0
    N: int = 20
    obs_every: int = 5
    n_obs: int = 4
    sigma_b: float = 0.01
    sigma_obs: float = 0.01
    noise: bool = True
    seed: int = 0


@dataclass
class DiffusionProtocol:
    """Material-parameter estimation on the nonlinear diffusion surrogate.

    Parameters are estimated in background units, ``vartheta = param_scale *
    theta / theta_b``, with box bounds ``param_scale * (1 +- bound_rel)``.
    ``param_scale`` and ``clock_scale`` balance the augmented Jacobian.
    ``linearization = "background"`` keeps the discrete map, and therefore the
    adjoint gradient, exact; the synthetic truth is generated with the same
    discrete model.
    """

    M: int = 40
    length: float = 1.0
    kappa: float = 0.1
    amplitude: float = 1e6
    frequency: float = 2.0
    coil: tuple = (0.1, 0.3)
    theta_true: tuple = (2.88e3, 5.99e7, 4.35e4, 1.89)
    t0: float = 0.0
    tF: float = 0.5
    N: int = 50
    obs_every: int = 10
    n_obs: int = 5
    sigma_b_rel: float = 0.1
    bound_rel: float = 0.2
    sigma_obs_rel: float = 0.001
    param_scale: float = 1e4
    clock_scale: float = 1e5
    linearization: str = "background"
    noise: bool = True
    seed: int = 3


@dataclass
class Experiment:
    """Synthesized twin experiment, ready to optimize."""

    theta_true: np.ndarray
    theta_b: np.ndarray
    obs: list
    problem: FourDVarProblem
    sigma_obs: np.ndarray
    bounds: np.ndarray | None = None
    scale: np.ndarray | None = None  # physical = scale * estimated, when not None

    def __iter__(self):
        return iter((self.theta_true, self.theta_b, self.obs))


def _rngs(seed: int):
    bg, ob = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(bg), np.random.default_rng(ob)


def lorenz_sigma_obs(Hy: np.ndarray, rel: float, rule: str) -> np.ndarray:
    """Observation standard deviation from the true observed values ``Hy`` (n_obs x m)."""
    if rule == "mean":
        return np.full(Hy.shape[1], rel * abs(Hy.mean()))
    if rule == "literal":
        return np.abs(1.0 / (rel * Hy.sum(axis=0) / Hy.shape[0]))
    raise ValueError(f"unknown sigma_obs rule {rule!r}")


def lorenz_truth(model: OdeModel, tableau: Tableau, protocol: LorenzProtocol,
                 cfg: KrylovConfig = KrylovConfig()) -> np.ndarray:
    """Spun-up initial state at ``t0``."""
    j = np.arange(1, protocol.K + 1)
    y = 1.0 + 0.1 * np.mod(j, 5)
    span = protocol.dt_spin * protocol.spin_steps
    n_spin = max(1, int(round(span / protocol.dt)))
    return integrate(model, tableau, y, protocol.t0 - span, protocol.t0, n_spin, cfg).y_final


def synthesize_experiment(model: OdeModel, tableau: Tableau, protocol,
                          cfg: KrylovConfig = KrylovConfig()) -> Experiment:
    """Truth, background draw and noisy observations for ``protocol``.

    Draws use independent streams spawned from ``protocol.seed``. With
    ``protocol.noise`` off the background equals the truth and the
    observations are exact.
    """
    if isinstance(protocol, LorenzProtocol):
        return _synthesize_lorenz(model, tableau, protocol, cfg)
    if isinstance(protocol, DiffusionProtocol):
        return _synthesize_diffusion(model, tableau, protocol, cfg)
    if isinstance(protocol, LinearProtocol):
        return _synthesize_linear(model, tableau, protocol, cfg)
    raise TypeError(f"unsupported protocol {type(protocol).__name__}")


def _synthesize_lorenz(model, tableau, protocol: LorenzProtocol, cfg) -> Experiment:
    from .models import lorenz96_obs

    p = protocol
    if model is None:
        from .models import Lorenz96
        model = Lorenz96(p.K, p.forcing, p.standard_form)
    rng_b, rng_o = _rngs(p.seed)
    theta_true = lorenz_truth(model, tableau, p, cfg)
    B = lorenz_background_covariance(p.sigma_b_rel * theta_true, p.alpha, p.length_scale, p.K)
    theta_b = theta_true + B.sample(rng_b) if p.noise else theta_true.copy()
    H = lorenz96_obs(p.K)
    tF = p.t0 + p.N * p.dt
    truth = integrate(model, tableau, theta_true, p.t0, tF, p.N, cfg).states
    steps = [p.obs_every * (i + 1) for i in range(p.n_obs)]
    Hy = np.array([H.apply(truth[j]) for j in steps])
    sigma = lorenz_sigma_obs(Hy, p.sigma_obs_rel, p.sigma_obs_rule)
    R = CovarianceModel.diagonal(sigma, "observation")
    obs = [Observation(j, hy + (R.sample(rng_o) if p.noise else 0.0), R)
           for j, hy in zip(steps, Hy)]
    problem = FourDVarProblem(model=model, tableau=tableau, H=H, theta_b=theta_b, B=B, obs=obs,
                              t0=p.t0, tF=tF, N=p.N, mode="initial", cfg=cfg,
                              linearization=p.linearization)
    return Experiment(theta_true, theta_b, obs, problem, sigma)


def _synthesize_linear(model, tableau, protocol: LinearProtocol, cfg) -> Experiment:
    from .models import LinearModel

    p = protocol
    rng_b, rng_o = _rngs(p.seed)
    if model is None:
        A = rng_b.standard_normal((p.dim, p.dim)) / np.sqrt(p.dim)
        A -= (np.max(np.linalg.eigvals(A).real) + p.decay) * np.eye(p.dim)
        model = LinearModel(A)
    theta_true = p.amplitude * rng_b.standard_normal(model.dim)
    B = CovarianceModel.diagonal(np.full(model.dim, p.sigma_b), "background")
    theta_b = theta_true + B.sample(rng_b) if p.noise else theta_true.copy()
    H = LinearObservation(np.eye(model.dim))
    truth = integrate(model, tableau, theta_true, p.t0, p.tF, p.N, cfg).states
    R = CovarianceModel.diagonal(np.full(model.dim, p.sigma_obs), "observation")
    steps = [p.obs_every * (i + 1) for i in range(p.n_obs)]
    obs = [Observation(j, truth[j] + (R.sample(rng_o) if p.noise else 0.0), R) for j in steps]
    problem = FourDVarProblem(model=model, tableau=tableau, H=H, theta_b=theta_b, B=B, obs=obs,
                              t0=p.t0, tF=p.tF, N=p.N, mode="initial", cfg=cfg)
    return Experiment(theta_true, theta_b, obs, problem, np.full(model.dim, p.sigma_obs))


def _synthesize_diffusion(model, tableau, protocol: DiffusionProtocol, cfg) -> Experiment:
    from .models import Diffusion1D, MaterialLaw

    p = protocol
    rng_b, rng_o = _rngs(p.seed)
    theta_true = np.array(p.theta_true, dtype=float)
    sig_b = p.sigma_b_rel * theta_true
    theta_b = theta_true + sig_b * rng_b.standard_normal(4) if p.noise else theta_true.copy()
    if np.any(theta_b <= 0):
        raise ValueError(f"seed {p.seed} draws a non-positive background {theta_b}")
    scale = theta_b / p.param_scale
    sys = Diffusion1D(M=p.M, length=p.length, kappa=p.kappa, law=MaterialLaw(tuple(theta_b)),
                      amplitude=p.amplitude, frequency=p.frequency, coil=p.coil,
                      theta_scale=scale, clock_scale=p.clock_scale)
    aug = augment_model(sys, 4)
    H = RhsFunctional(aug, np.concatenate([sys.coil_weights(), np.zeros(4)]))
    y_ini = sys.initial_state(p.t0)
    var_true = theta_true / scale
    B = CovarianceModel(((p.sigma_b_rel * theta_true) / scale) ** 2, "background")
    problem = FourDVarProblem(model=aug, tableau=tableau, H=H, theta_b=theta_b / scale, B=B, obs=[],
                              t0=p.t0, tF=p.tF, N=p.N, mode="parameters", y_ini=y_ini, cfg=cfg,
                              linearization=p.linearization)
    # twin experiment: the truth run uses the same discrete model as the estimator
    truth = problem.forward(var_true).states
    problem.n_forward = 0
    steps = [p.obs_every * (i + 1) for i in range(p.n_obs)]
    Hy = np.array([H.apply(truth[j]) for j in steps])
    sigma = np.array([p.sigma_obs_rel * np.sqrt(np.sum(Hy ** 2))])
    R = CovarianceModel.diagonal(sigma, "observation")
    problem.obs = [Observation(j, hy + (R.sample(rng_o) if p.noise else 0.0), R)
                   for j, hy in zip(steps, Hy)]
    obs = problem.obs
    bounds = p.param_scale * np.column_stack([np.full(4, 1 - p.bound_rel), np.full(4, 1 + p.bound_rel)])
    return Experiment(theta_true, theta_b, obs, problem, sigma, bounds=bounds, scale=scale)
