import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from epirkw.integrator import (FixedMatrix, JacobianAlong, MatrixOperator, PerturbedJacobian,
                               Prescribed, epirkw_step, forward_difference, integrate, remainder)
from epirkw.models import LinearModel, Lorenz96, ZeroModel


def lorenz_start(model):
    y0 = 1.0 + 0.1 * np.mod(np.arange(1, model.dim + 1), 5)
    return solve_ivp(lambda t, y: model.f(y), (0, 0.15), y0, method="DOP853",
                     rtol=1e-13, atol=1e-13).y[:, -1]


@pytest.fixture(scope="module")
def lorenz_case():
    m = Lorenz96()
    y0 = lorenz_start(m)
    ref = solve_ivp(lambda t, y: m.f(y), (0, 0.3), y0, method="DOP853",
                    rtol=1e-13, atol=1e-13).y[:, -1]
    return m, y0, ref


def slope(model, tab, y0, ref, Ns=(20, 40, 80)):
    errs = [np.linalg.norm(integrate(model, tab, y0, 0.0, 0.3, N).y_final - ref) for N in Ns]
    return np.polyfit(np.log([0.3 / N for N in Ns]), np.log(errs), 1)[0]


def test_zero_dynamics_is_identity(tableau):
    y0 = np.array([1.0, -2.0, 3.0])
    tape = integrate(ZeroModel(3), tableau, y0, 0.0, 1.0, 7)
    assert np.array_equal(tape.y_final, y0)


def test_linear_model_with_exact_t_is_exponential(tableau, rng):
    A = rng.standard_normal((6, 6))
    y0 = rng.standard_normal(6)
    tape = integrate(LinearModel(A), tableau, y0, 0.0, 0.8, 4)
    np.testing.assert_allclose(tape.y_final, expm(0.8 * A) @ y0, rtol=1e-11)


def test_remainder_vanishes_for_linear_model(rng):
    A = rng.standard_normal((4, 4))
    m = LinearModel(A)
    y, Y = rng.standard_normal(4), rng.standard_normal(4)
    assert np.allclose(remainder(m, MatrixOperator(A), y, Y), 0.0, atol=1e-14)


def test_forward_difference_matches_binomial_weights(rng):
    R = [np.zeros(2)] + [rng.standard_normal(2) for _ in range(3)]
    np.testing.assert_array_equal(forward_difference(R, 2), R[1])
    np.testing.assert_allclose(forward_difference(R, 3), R[2] - 2 * R[1])
    np.testing.assert_allclose(forward_difference(R, 4), R[3] - 3 * R[2] + 3 * R[1])
    with pytest.raises(AssertionError):
        forward_difference(R[:2], 3)


def test_forward_order_exact_jacobian(tableau, lorenz_case):
    m, y0, ref = lorenz_case
    assert 2.7 <= slope(m, tableau, y0, ref) <= 3.3


def test_w_property_perturbed_and_arbitrary_t(tableau, lorenz_case, rng):
    m, y0, ref = lorenz_case
    E = rng.standard_normal((40, 40))
    E *= 0.1 / np.linalg.norm(E, 2)
    assert slope(m.with_w_policy(PerturbedJacobian(E)), tableau, y0, ref) >= 2.7
    T = rng.standard_normal((40, 40))
    T *= 2.0 / np.linalg.norm(T, 2)
    assert slope(m.with_w_policy(FixedMatrix(T)), tableau, y0, ref) >= 2.7


def test_tape_layout(tab3, lorenz_case):
    m, y0, _ = lorenz_case
    tape = integrate(m, tab3, y0, 0.0, 0.03, 5)
    assert tape.N == 5 and len(tape.states) == 6 and len(tape.operators) == 5
    assert np.array_equal(tape.states[0], y0)
    for n, rec in enumerate(tape.records):
        assert len(rec.stages) == tab3.s - 1
        assert rec.h == pytest.approx(0.006) and rec.t_n == pytest.approx(0.006 * n)
    y1, stages = epirkw_step(m, tab3, y0, 0.006)
    assert np.array_equal(y1, tape.states[1])
    assert all(np.array_equal(a, b) for a, b in zip(stages, tape.records[0].stages))


def test_deterministic(tab3, lorenz_case):
    m, y0, _ = lorenz_case
    a = integrate(m, tab3, y0, 0.0, 0.05, 10).y_final
    b = integrate(m, tab3, y0, 0.0, 0.05, 10).y_final
    assert np.array_equal(a, b)


def test_policies_supply_the_requested_operator(tab3, lorenz_case, rng):
    m, y0, _ = lorenz_case
    zs = [rng.standard_normal(40) for _ in range(3)]
    v = rng.standard_normal(40)
    along = m.with_w_policy(JacobianAlong(zs))
    np.testing.assert_allclose(along.w_matrix(y0, 0.0, 2).matvec(v), m.jac_vec(zs[2], v))
    ops = [MatrixOperator(np.eye(40) * k) for k in range(3)]
    pres = m.with_w_policy(Prescribed(ops))
    assert pres.w_matrix(y0, 0.0, 1) is ops[1]
    E = rng.standard_normal((40, 40))
    pert = m.with_w_policy(PerturbedJacobian(E))
    np.testing.assert_allclose(pert.w_matrix(y0).matvec(v), m.jac_vec(y0, v) + E @ v)
    np.testing.assert_allclose(pert.w_matrix(y0).rmatvec(v), m.jac_T_vec(y0, v) + E.T @ v)
    # the original model keeps the exact Jacobian
    np.testing.assert_allclose(m.w_matrix(y0).matvec(v), m.jac_vec(y0, v))


def test_step_uses_given_operator(tab3, rng):
    # a zero T turns the step into an explicit Runge-Kutta-like update of y' = A y
    A = rng.standard_normal((3, 3)) * 0.1
    m = LinearModel(A)
    y0 = rng.standard_normal(3)
    exact, _ = epirkw_step(m, tab3, y0, 0.1)
    with_zero, _ = epirkw_step(m, tab3, y0, 0.1, w=MatrixOperator(np.zeros((3, 3))))
    ref = expm(0.1 * A) @ y0
    assert np.linalg.norm(exact - ref) < 1e-13
    assert 1e-9 < np.linalg.norm(with_zero - ref) < 1e-5


def test_argument_validation(tab3):
    m = ZeroModel(2)
    with pytest.raises(ValueError):
        integrate(m, tab3, np.zeros(2), 0.0, 1.0, 0)
    with pytest.raises(ValueError):
        integrate(m, tab3, np.zeros(2), 1.0, 1.0, 3)
    with pytest.raises(ValueError):
        integrate(m, tab3, np.zeros(3), 0.0, 1.0, 3)
    with pytest.raises(ValueError):
        epirkw_step(m, tab3, np.zeros(2), 0.0)


def test_blow_up_is_reported(tab3):
    m = LinearModel(np.array([[800.0]]))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises((FloatingPointError, ArithmeticError)):
            integrate(m, tab3, np.ones(1), 0.0, 2.0, 1)


def rk4(model, y, h, n):
    for _ in range(n):
        k1 = model.f(y)
        k2 = model.f(y + h / 2 * k1)
        k3 = model.f(y + h / 2 * k2)
        k4 = model.f(y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def test_single_step_against_rk4_microsteps(tableau, lorenz_case):
    m, y0, _ = lorenz_case
    h = 0.0003
    y1, _ = epirkw_step(m, tableau, y0, h)
    ref = rk4(m, y0, h / 100, 100)
    assert np.all(np.isfinite(y1))
    # local error O(h^4) against the increment O(h)
    assert np.linalg.norm(y1 - ref) <= 1e-6 * np.linalg.norm(ref - y0)
