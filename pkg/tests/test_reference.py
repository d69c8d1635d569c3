import numpy as np
import pytest
from scipy.linalg import expm

from epirkw.models import Lorenz96, LinearModel
from epirkw.reference import fitted_slope, reference_adjoint, reference_solution


def test_linear_forward_and_adjoint(rng):
    A = rng.standard_normal((5, 5)) / 2
    m = LinearModel(A)
    y0, lam = rng.standard_normal(5), rng.standard_normal(5)
    P = expm(0.7 * A)
    np.testing.assert_allclose(reference_solution(m, y0, 0.1, 0.8), P @ y0, rtol=1e-10)
    lam0, yF = reference_adjoint(m, y0, 0.1, 0.8, lam)
    np.testing.assert_allclose(lam0, P.T @ lam, rtol=1e-10)
    np.testing.assert_allclose(yF, P @ y0, rtol=1e-10)


def test_lorenz_adjoint_matches_fd_of_reference(rng):
    m = Lorenz96()
    y0 = 1.0 + 0.1 * np.mod(np.arange(1, 41), 5) + 0.01 * rng.standard_normal(40)
    lam, v = rng.standard_normal(40), rng.standard_normal(40)
    lam0, _ = reference_adjoint(m, y0, 0.0, 0.1, lam)
    eps = 1e-5
    fd = (reference_solution(m, y0 + eps * v, 0.0, 0.1) - reference_solution(m, y0 - eps * v, 0.0, 0.1)) / (2 * eps)
    assert lam0 @ v == pytest.approx(lam @ fd, rel=1e-7)


def test_fitted_slope():
    h = np.array([0.1, 0.05, 0.025, 0.0125])
    assert fitted_slope(h, 7.0 * h ** 3) == pytest.approx(3.0, abs=1e-12)
    assert fitted_slope(h, [0.0, 0.0, 1e-3, 1e-4]) == pytest.approx(np.log(10) / np.log(2))
    assert np.isnan(fitted_slope(h, np.zeros(4)))
    assert np.isnan(fitted_slope(h, [0.0, np.nan, np.inf, 1.0]))
