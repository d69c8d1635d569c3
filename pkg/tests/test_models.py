import numpy as np
import pytest
from scipy.linalg import expm

from epirkw.integrator import epirkw_step
from epirkw.models import (Diffusion1D, Lorenz96, MaterialLaw, lorenz96_jtv, lorenz96_jv,
                           lorenz96_obs, lorenz96_obs_matrix, lorenz96_rhs, material_nu,
                           material_nu_ds, material_nu_dtheta)

THETA = (2.88e3, 5.99e7, 4.35e4, 1.89)


def lorenz_loop(y, F, standard):
    K = y.size
    out = np.empty(K)
    for j in range(K):
        a, b, c = y[(j - 1) % K], y[(j - 2) % K], y[(j + 1) % K]
        if standard:
            out[j] = a * (c - b) - y[j] + F
        else:
            out[j] = -a * (b - c - y[j]) + F
    return out


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestLorenz:
    @pytest.mark.parametrize("standard", [True, False])
    def test_rhs_matches_component_formula(self, rng, standard):
        y = rng.standard_normal(40) * 3
        np.testing.assert_allclose(lorenz96_rhs(y, 8.0, standard), lorenz_loop(y, 8.0, standard),
                                   rtol=1e-14, atol=1e-13)

    @pytest.mark.parametrize("standard", [True, False])
    def test_zero_state(self, standard):
        np.testing.assert_array_equal(lorenz96_rhs(np.zeros(40), 8.0, standard), np.full(40, 8.0))

    @pytest.mark.parametrize("standard", [True, False])
    def test_adjoint_pair_and_fd(self, rng, standard):
        y, v, w = (rng.standard_normal(40) for _ in range(3))
        Jv = lorenz96_jv(y, v, standard)
        JTw = lorenz96_jtv(y, w, standard)
        assert abs(Jv @ w - v @ JTw) <= 1e-13 * np.linalg.norm(Jv) * np.linalg.norm(w)
        eps = 1e-6
        fd = (lorenz96_rhs(y + eps * v, 8.0, standard) - lorenz96_rhs(y - eps * v, 8.0, standard)) / (2 * eps)
        assert rel(Jv, fd) <= 1e-7
        m = Lorenz96(standard_form=standard)
        np.testing.assert_allclose(m.jacobian(y) @ v, Jv, atol=1e-13)

    def test_shift_equivariance(self, rng):
        y = rng.standard_normal(40)
        m = Lorenz96()
        np.testing.assert_allclose(m.f(np.roll(y, 3)), np.roll(m.f(y), 3), atol=1e-14)

    def test_dimension_check(self):
        with pytest.raises(ValueError):
            Lorenz96(K=3)


class TestObservation:
    def test_unit_vector(self):
        Hy = lorenz96_obs().apply(np.eye(40)[0])
        assert Hy.shape == (34,)
        assert Hy[0] == 1
        np.testing.assert_array_equal(Hy[30:], [1, 1, 0, 0])
        assert not Hy[1:30].any()

    def test_ones(self):
        Hy = lorenz96_obs().apply(np.ones(40))
        np.testing.assert_array_equal(Hy[:30], np.ones(30))
        np.testing.assert_array_equal(Hy[30:], [10, 20, 20, 10])

    def test_selected_components(self):
        y = np.arange(1.0, 41.0)
        Hy = lorenz96_obs().apply(y)
        np.testing.assert_array_equal(Hy[:10], np.arange(1, 20, 2))
        np.testing.assert_array_equal(Hy[10:30], np.arange(21, 41))

    def test_adjoint_pair(self, rng):
        H = lorenz96_obs()
        y, w = rng.standard_normal(40), rng.standard_normal(34)
        assert abs(H.apply(y) @ w - y @ H.adjoint_apply(y, w)) <= 1e-13 * np.linalg.norm(y) * np.linalg.norm(w)

    def test_dimension_check(self):
        with pytest.raises(ValueError):
            lorenz96_obs_matrix(20)


class TestMaterialLaw:
    law = MaterialLaw(THETA)

    def test_limit_at_zero(self):
        assert material_nu(self.law, 0.0) == pytest.approx(THETA[2] / (2 * THETA[0]), rel=1e-15)
        # continuity across the series switch
        assert material_nu(self.law, 1e-9) == pytest.approx(material_nu(self.law, 0.0), rel=1e-12)

    def test_saturation(self):
        s = 1e6 * THETA[0]
        assert material_nu(self.law, s) == pytest.approx((THETA[2] + THETA[3] * s) / s, rel=1e-12)

    def test_theta4_derivative_closed_form(self):
        s = np.array([1.0, 1e3, 1e4, 1e6])
        t1, t2 = THETA[:2]
        ref = (np.tanh(s / t1) + np.tanh(s / t2) ** 30) / (2 * s) * s
        np.testing.assert_allclose(material_nu_dtheta(self.law, s)[:, 3], ref, rtol=1e-13)

    def test_derivatives_match_fd(self):
        s = np.array([0.0, 10.0, 2e3, 3e4, 5e5, 8e7])
        for i in range(4):
            h = 1e-6 * THETA[i]
            up = list(THETA)
            dn = list(THETA)
            up[i] += h
            dn[i] -= h
            fd = (material_nu(MaterialLaw(tuple(up)), s) - material_nu(MaterialLaw(tuple(dn)), s)) / (2 * h)
            an = material_nu_dtheta(self.law, s)[:, i]
            np.testing.assert_allclose(an, fd, rtol=1e-7, atol=1e-7 * np.abs(fd).max())
        ss = s[1:]
        h = 1e-6 * ss
        fd = (material_nu(self.law, ss + h) - material_nu(self.law, ss - h)) / (2 * h)
        np.testing.assert_allclose(material_nu_ds(self.law, ss), fd, rtol=1e-7,
                                   atol=1e-7 * np.abs(fd).max())

    def test_validation(self):
        with pytest.raises(ValueError):
            MaterialLaw((0.0, 1.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            MaterialLaw((1.0, 2.0, 3.0))


def heat_matrix(M, dx):
    L = (np.diag(-2 * np.ones(M)) + np.diag(np.ones(M - 1), 1) + np.diag(np.ones(M - 1), -1)) / dx ** 2
    return L


class TestDiffusion:
    def sys(self, **kw):
        return Diffusion1D(law=MaterialLaw(THETA), **kw)

    def test_zero_state_zero_source(self):
        s = self.sys(amplitude=0.0)
        y = s.initial_state(0.0)
        out = s.f(y)
        assert not out[:-1].any() and out[-1] == s.clock_scale

    def test_linear_regime_is_heat_stencil(self):
        s = self.sys(amplitude=0.0)
        u = 1e-6 * np.sin(np.pi * s.x)
        y = np.append(u, 0.0)
        nu0 = THETA[2] / (2 * THETA[0])
        ref = nu0 / s.kappa * (heat_matrix(s.M, s.dx) @ u)
        assert rel(s.f(y)[:-1], ref) <= 1e-8

    @pytest.mark.parametrize("h", [1e-4, 1e-3])
    def test_one_step_matches_dense_heat_propagator(self, tab3, h):
        # theta4 = 0 and a tiny state make nu constant to roundoff
        law = MaterialLaw(THETA[:3] + (0.0,))
        s = Diffusion1D(law=law, amplitude=0.0, theta_scale=np.ones(4))
        u = 1e-6 * np.sin(np.pi * s.x) + 3e-7 * np.sin(3 * np.pi * s.x)
        y1, _ = epirkw_step(s, tab3, np.append(u, 0.0), h)
        nu0 = THETA[2] / (2 * THETA[0])
        ref = expm(h * nu0 / s.kappa * heat_matrix(s.M, s.dx)) @ u
        assert rel(y1[:-1], ref) <= 1e-10
        assert y1[-1] == pytest.approx(h * s.clock_scale)

    def state(self, rng, s):
        u = 1e3 * rng.standard_normal(s.M).cumsum() * s.dx * 50
        return np.append(u, 0.123 * s.clock_scale)

    @pytest.mark.parametrize("clock", [1.0, 1e5])
    def test_jacobian_adjoint_pairs(self, rng, clock):
        s = self.sys(clock_scale=clock)
        y = self.state(rng, s)
        vt = s.vartheta_nominal
        v, w, q = rng.standard_normal(s.dim), rng.standard_normal(s.dim), rng.standard_normal(4)
        lin = s.linearize(y, vt)
        Jv, JTw = lin.jv(v), lin.jtv(w)
        assert abs(Jv @ w - v @ JTw) <= 1e-12 * np.linalg.norm(Jv) * np.linalg.norm(w)
        Pq, PTw = lin.dtheta_v(q), lin.dtheta_T_v(w)
        assert abs(Pq @ w - q @ PTw) <= 1e-12 * np.linalg.norm(Pq) * np.linalg.norm(w)

    @pytest.mark.parametrize("clock", [1.0, 1e5])
    def test_jacobians_match_fd(self, rng, clock):
        s = self.sys(clock_scale=clock)
        y = self.state(rng, s)
        vt = s.vartheta_nominal
        v = rng.standard_normal(s.dim)
        v[-1] *= clock * 1e-3
        eps = 1e-7 * np.linalg.norm(y) / np.linalg.norm(v)
        fd = (s.rhs(y + eps * v, vt) - s.rhs(y - eps * v, vt)) / (2 * eps)
        assert rel(s.jv(y, vt, v), fd) <= 1e-6
        q = rng.standard_normal(4) * vt
        eps = 1e-6
        fd = (s.rhs(y, vt + eps * q) - s.rhs(y, vt - eps * q)) / (2 * eps)
        assert rel(s.dfdtheta_v(y, vt, q), fd) <= 1e-6

    def test_theta_scale_is_a_change_of_units(self, rng):
        a = self.sys()
        b = self.sys(theta_scale=np.array(THETA) / 1e4)
        y = self.state(rng, a)
        np.testing.assert_allclose(a.f(y), b.f(y), rtol=1e-14)
        np.testing.assert_allclose(b.vartheta_nominal, 1e4)
        w = rng.standard_normal(a.dim)
        np.testing.assert_allclose(b.dfdtheta_T_v(y, b.vartheta_nominal, w),
                                   a.dfdtheta_T_v(y, a.vartheta_nominal, w) / 1e4, rtol=1e-12)

    def test_coil_weights_average(self):
        s = self.sys()
        c = s.coil_weights()
        assert c[-1] == 0 and c.sum() == pytest.approx(1.0)
        assert np.all(c[:-1][(s.x < 0.1) | (s.x > 0.3)] == 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            self.sys(M=2)
        with pytest.raises(ValueError):
            self.sys(kappa=0.0)
        with pytest.raises(ValueError):
            self.sys(coil=(0.5, 0.51))
