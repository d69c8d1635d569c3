"""Test systems for the integrator and the 4D-Var machinery."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .integrator import OdeModel, WOperator
from .observation import LinearObservation


class ZeroModel(OdeModel):
    """``y' = 0``."""

    def __init__(self, dim: int):
        self.dim = int(dim)

    def f(self, y):
        return np.zeros(self.dim)

    def jac_vec(self, y, v):
        return np.zeros(self.dim)

    def jac_T_vec(self, y, v):
        return np.zeros(self.dim)


class LinearModel(OdeModel):
    """``y' = A y``."""

    def __init__(self, A):
        self.A = np.array(A, dtype=float)
        self.dim = self.A.shape[0]

    def f(self, y):
        return self.A @ y

    def jac_vec(self, y, v):
        return self.A @ v

    def jac_T_vec(self, y, v):
        return self.A.T @ v

    def jacobian(self, y):
        return self.A.copy()


# --------------------------------------------------------------------------
# Lorenz-96
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _cyclic(K: int):
    """Index arrays ``(j-2, j-1, j+1, j+2) mod K``."""
    j = np.arange(K)
    return tuple((j + k) % K for k in (-2, -1, 1, 2))


def lorenz96_rhs(y, forcing: float = 8.0, standard_form: bool = True):
    """Lorenz-96 right-hand side.

    ``standard_form``: ``y_{j-1} (y_{j+1} - y_{j-2}) - y_j + F``.
    Otherwise the variant ``-y_{j-1} (y_{j-2} - y_{j+1} - y_j) + F``, where
    ``y_j`` sits inside the product.
    """
    y = np.asarray(y, dtype=float)
    m2, m1, p1, _ = _cyclic(y.size)
    ym1 = y[m1]
    adv = ym1 * (y[p1] - y[m2])
    if standard_form:
        return adv - y + forcing
    return adv + ym1 * y + forcing


def lorenz96_jv(y, v, standard_form: bool = True):
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    m2, m1, p1, _ = _cyclic(y.size)
    ym1, vm1 = y[m1], v[m1]
    out = ym1 * (v[p1] - v[m2]) + (y[p1] - y[m2]) * vm1
    if standard_form:
        return out - v
    return out + ym1 * v + y * vm1


def lorenz96_jtv(y, w, standard_form: bool = True):
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    m2, m1, p1, p2 = _cyclic(y.size)
    # (J^T w)_k collects every f_j that depends on y_k
    out = y[m2] * w[m1] - y[p1] * w[p2] + (y[p2] - y[m1]) * w[p1]
    if standard_form:
        return out - w
    return out + y[m1] * w + y[p1] * w[p1]


class Lorenz96(OdeModel):
    """Lorenz-96 with ``K`` cyclic components and constant forcing."""

    def __init__(self, K: int = 40, forcing: float = 8.0, standard_form: bool = True):
        if K < 4:
            raise ValueError(f"Lorenz-96 needs K >= 4, got {K}")
        self.dim = self.K = int(K)
        self.forcing = float(forcing)
        self.standard_form = bool(standard_form)

    def f(self, y):
        return lorenz96_rhs(y, self.forcing, self.standard_form)

    def jac_vec(self, y, v):
        return lorenz96_jv(y, v, self.standard_form)

    def jac_T_vec(self, y, v):
        return lorenz96_jtv(y, v, self.standard_form)

    def jacobian(self, y):
        y = np.asarray(y, dtype=float)
        K = self.K
        J = np.zeros((K, K))
        j = np.arange(K)
        np.add.at(J, (j, (j + 1) % K), y[(j - 1) % K])
        np.add.at(J, (j, (j - 2) % K), -y[(j - 1) % K])
        np.add.at(J, (j, (j - 1) % K), y[(j + 1) % K] - y[(j - 2) % K])
        if self.standard_form:
            J[j, j] -= 1.0
        else:
            J[j, j] += y[(j - 1) % K]
            np.add.at(J, (j, (j - 1) % K), y)
        return J


def lorenz96_obs_matrix(K: int = 40) -> np.ndarray:
    """34 x 40 matrix: 30 selected components followed by four partial sums."""
    if K != 40:
        raise ValueError(f"the Lorenz-96 observation operator is defined for K = 40, got {K}")
    rows = []
    eye = np.eye(K)
    rows.extend(eye[j] for j in range(0, 19, 2))      # y1, y3, ..., y19
    rows.extend(eye[j] for j in range(20, 40))        # y21, ..., y40
    for lo, hi in ((1, 10), (1, 20), (21, 40), (31, 40)):
        r = np.zeros(K)
        r[lo - 1:hi] = 1.0
        rows.append(r)
    return np.array(rows)


def lorenz96_obs(K: int = 40) -> LinearObservation:
    return LinearObservation(lorenz96_obs_matrix(K))


# --------------------------------------------------------------------------
# Material law
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialLaw:
    """``nu(s) = (tanh(s/t1) + tanh(s/t2)^30) (t3 + t4 s) / (2 s)``."""

    theta: tuple = (2.88e3, 5.99e7, 4.35e4, 1.89)

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        if th.shape != (4,) or not np.all(np.isfinite(th)):
            raise ValueError(f"material law needs 4 finite parameters, got {self.theta}")
        if th[0] <= 0 or th[1] <= 0:
            raise ValueError("theta1 and theta2 must be positive")


_SMALL = 1e-2


def _tanhc(x):
    """``tanh(x) / x`` with the removable singularity filled in."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SMALL
    xs = np.where(small, 1.0, x)
    x2 = x * x
    series = 1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0 - 17.0 * x2 ** 3 / 315.0
    return np.where(small, series, np.tanh(xs) / xs)


def _tanhc_d(x):
    """Derivative of ``tanh(x) / x``."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SMALL
    xs = np.where(small, 1.0, x)
    x2 = x * x
    series = x * (-2.0 / 3.0 + 8.0 * x2 / 15.0 - 102.0 * x2 * x2 / 315.0)
    return np.where(small, series, (xs * _sech2(xs) - np.tanh(xs)) / (xs * xs))


def _sech2(x):
    e = np.exp(-2.0 * np.abs(x))
    return 4.0 * e / (1.0 + e) ** 2


def _parts(theta, s):
    t1, t2, t3, t4 = (float(v) for v in theta)
    s = np.asarray(s, dtype=float)
    x1, x2 = s / t1, s / t2
    tanh2 = np.tanh(x2)
    p29 = tanh2 ** 29
    q = _tanhc(x1) / t1 + _tanhc(x2) * p29 / t2  # (tanh(x1) + tanh(x2)^30) / s
    lin = t3 + t4 * s
    return t1, t2, t3, t4, s, x1, x2, tanh2, p29, q, lin


def material_nu(law: MaterialLaw, s):
    """Reluctivity ``nu(s)`` for ``s >= 0``; ``nu(0) = t3 / (2 t1)``."""
    *_, q, lin = _parts(law.theta, s)
    return 0.5 * q * lin


def material_nu_ds(law: MaterialLaw, s):
    """``d nu / d s``."""
    t1, t2, t3, t4, s, x1, x2, tanh2, p29, q, lin = _parts(law.theta, s)
    p28 = tanh2 ** 28
    dq = _tanhc_d(x1) / t1 ** 2 + (_tanhc_d(x2) * p29 + _tanhc(x2) * 29.0 * p28 * _sech2(x2)) / t2 ** 2
    return 0.5 * (dq * lin + q * t4)


def material_nu_dtheta(law: MaterialLaw, s):
    """``d nu / d theta`` stacked along the last axis (shape ``s.shape + (4,)``)."""
    t1, t2, t3, t4, s, x1, x2, tanh2, p29, q, lin = _parts(law.theta, s)
    d1 = -_sech2(x1) * lin / (2.0 * t1 ** 2)
    d2 = -15.0 * p29 * _sech2(x2) * lin / t2 ** 2
    d3 = 0.5 * q
    d4 = 0.5 * s * q
    return np.stack([d1, d2, d3, d4], axis=-1)


# --------------------------------------------------------------------------
# Nonlinear diffusion surrogate
# --------------------------------------------------------------------------

class Diffusion1D(OdeModel):
    """Method-of-lines surrogate ``kappa u_t = (nu(|u_x|) u_x)_x + source(x, t)``.

    ``M`` interior nodes on ``(0, length)`` with ``u = 0`` at both ends and a
    conservative finite-volume flux. The source is ``amplitude sin(2 pi
    frequency t)`` on the coil interval and zero elsewhere. The state carries
    the scaled time ``clock_scale * t`` as its last component so the system is
    autonomous.

    Parameter-dependent methods (``rhs``, ``jv``, ``jtv``, ``dfdtheta_v``,
    ``dfdtheta_T_v``) take relative parameters ``vartheta`` with physical
    ``theta = theta_scale * vartheta``. The plain ``OdeModel`` interface uses
    ``law.theta``.

    ``clock_scale`` and ``theta_scale`` only change units. Choosing them so
    the clock and parameter columns of the Jacobian are comparable to the
    diffusion block keeps Krylov products accurate on the augmented system.
    """

    def __init__(self, M: int = 40, length: float = 1.0, kappa=0.1,
                 law: MaterialLaw = MaterialLaw(), amplitude: float = 1e6,
                 frequency: float = 2.0, coil=(0.1, 0.3), theta_scale=None,
                 clock_scale: float = 1.0):
        if M < 3:
            raise ValueError(f"Diffusion1D needs M >= 3, got {M}")
        self.M = int(M)
        self.dim = self.M + 1
        self.length = float(length)
        self.dx = self.length / (self.M + 1)
        self.x = self.dx * np.arange(1, self.M + 1)
        kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (self.M,)).copy()
        if np.any(kappa <= 0):
            raise ValueError("kappa must be positive")
        self.kappa = kappa
        self.law = law
        self.amplitude = float(amplitude)
        self.frequency = float(frequency)
        self.coil = (float(coil[0]), float(coil[1]))
        self.coil_mask = ((self.x >= self.coil[0]) & (self.x <= self.coil[1])).astype(float)
        if not self.coil_mask.any():
            raise ValueError("coil interval contains no grid node")
        self.theta_scale = (np.asarray(law.theta, dtype=float) if theta_scale is None
                            else np.asarray(theta_scale, dtype=float))
        self._scale_kx = 1.0 / (self.kappa * self.dx)
        if not clock_scale > 0:
            raise ValueError("clock_scale must be positive")
        self.clock_scale = float(clock_scale)

    # -- helpers ---------------------------------------------------------
    def law_at(self, vartheta) -> MaterialLaw:
        return MaterialLaw(tuple(self.theta_scale * np.asarray(vartheta, dtype=float)))

    @property
    def vartheta_nominal(self) -> np.ndarray:
        return np.asarray(self.law.theta, dtype=float) / self.theta_scale

    def _grad(self, u):
        return np.diff(u, prepend=0.0, append=0.0) / self.dx

    def _div_T(self, w):
        """Transpose of ``F -> diff(F) / (kappa dx)``."""
        a = w * self._scale_kx
        return -np.diff(a, prepend=0.0, append=0.0)

    def source(self, t):
        return self.amplitude * np.sin(2 * np.pi * self.frequency * t) * self.coil_mask

    def source_dt(self, t):
        omega = 2 * np.pi * self.frequency
        return self.amplitude * omega * np.cos(omega * t) * self.coil_mask

    # -- parameter-explicit interface ------------------------------------
    def rhs(self, y, vartheta):
        law = self.law_at(vartheta)
        u, t = y[:-1], y[-1] / self.clock_scale
        g = self._grad(u)
        F = material_nu(law, np.abs(g)) * g
        out = np.empty(self.dim)
        out[:-1] = np.diff(F) * self._scale_kx + self.source(t) / self.kappa
        out[-1] = self.clock_scale
        return out

    def linearize(self, y, vartheta) -> "DiffusionLinearization":
        """Derivatives of the right-hand side at ``(y, vartheta)``."""
        return DiffusionLinearization(self, y, vartheta)

    def jv(self, y, vartheta, v):
        return self.linearize(y, vartheta).jv(v)

    def jtv(self, y, vartheta, w):
        return self.linearize(y, vartheta).jtv(w)

    def dfdtheta_v(self, y, vartheta, q):
        return self.linearize(y, vartheta).dtheta_v(q)

    def dfdtheta_T_v(self, y, vartheta, w):
        return self.linearize(y, vartheta).dtheta_T_v(w)

    # -- OdeModel interface at the nominal law ---------------------------
    def f(self, y):
        return self.rhs(y, self.vartheta_nominal)

    def jac_vec(self, y, v):
        return self.jv(y, self.vartheta_nominal, v)

    def jac_T_vec(self, y, v):
        return self.jtv(y, self.vartheta_nominal, v)

    def jacobian_operator(self, y):
        return _StateBlock(self.linearize(y, self.vartheta_nominal))

    def coil_weights(self) -> np.ndarray:
        """Weights averaging ``u_t`` over the coil nodes (zero on the clock)."""
        c = np.zeros(self.dim)
        c[:-1] = self.coil_mask / self.coil_mask.sum()
        return c

    def initial_state(self, t0: float = 0.0) -> np.ndarray:
        y = np.zeros(self.dim)
        y[-1] = self.clock_scale * t0
        return y


class DiffusionLinearization:
    """Face coefficients of the surrogate's Jacobian blocks at one state."""

    def __init__(self, sys: Diffusion1D, y, vartheta):
        law = sys.law_at(vartheta)
        y = np.asarray(y, dtype=float)
        self.sys = sys
        self.g = sys._grad(y[:-1])
        s = np.abs(self.g)
        self.dflux = material_nu(law, s) + s * material_nu_ds(law, s)
        # d(flux)/d(vartheta), faces x 4
        self.dflux_dtheta = (material_nu_dtheta(law, s) * sys.theta_scale) * self.g[:, None]
        self.src_dt = sys.source_dt(y[-1] / sys.clock_scale) / (sys.kappa * sys.clock_scale)

    def jv(self, v):
        sys = self.sys
        out = np.zeros(sys.dim)
        out[:-1] = np.diff(self.dflux * sys._grad(v[:-1])) * sys._scale_kx + self.src_dt * v[-1]
        return out

    def jtv(self, w):
        sys = self.sys
        z = self.dflux * sys._div_T(w[:-1])
        out = np.empty(sys.dim)
        out[:-1] = -np.diff(z) / sys.dx
        out[-1] = self.src_dt @ w[:-1]
        return out

    def dtheta_v(self, q):
        sys = self.sys
        out = np.zeros(sys.dim)
        out[:-1] = np.diff(self.dflux_dtheta @ np.asarray(q, dtype=float)) * sys._scale_kx
        return out

    def dtheta_T_v(self, w):
        return self.sys._div_T(w[:-1]) @ self.dflux_dtheta


class _StateBlock(WOperator):
    def __init__(self, lin: DiffusionLinearization):
        self.lin = lin

    def matvec(self, v):
        return self.lin.jv(v)

    def rmatvec(self, v):
        return self.lin.jtv(v)
