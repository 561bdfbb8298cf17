"""Quadrature, root finding, linear solves and delay-system integration."""

import math

import numpy as np
import pytest

from boundtrap import numerics as nm


def test_integrate_sine():
    res = nm.integrate(np.sin, (0.0, math.pi))
    assert res.converged
    assert abs(res.value - 2.0) < 1e-12


def test_integrate_complex_oscillatory():
    Om = 3.7
    T = 40.0
    res = nm.integrate(lambda t: np.exp((1j * Om - 1) * t), (0.0, T), limit=2000)
    exact = (1 - np.exp((1j * Om - 1) * T)) / (1 - 1j * Om)
    assert abs(res.value - exact) < 1e-9


def test_trapezoid_weights_sum():
    w = nm.trapezoid_weights(11, 0.1)
    assert w.sum() == pytest.approx(1.0)
    assert w[0] == w[-1] == pytest.approx(0.05)


def test_solve_linear_identity_and_adjugate():
    x, cond = nm.solve_linear(np.eye(3), np.array([1, 2j, 3]))
    assert np.allclose(x, [1, 2j, 3]) and cond == pytest.approx(1.0)
    A = np.array([[2, 1j], [3, 4 - 1j]])
    b = np.array([1.0, -2.0])
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    adj = np.array([[A[1, 1], -A[0, 1]], [-A[1, 0], A[0, 0]]])
    x, _ = nm.solve_linear(A, b)
    assert np.allclose(x, adj @ b / det, atol=1e-14)


def test_solve_linear_random_residual():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    b = rng.normal(size=8) + 0j
    x, _ = nm.solve_linear(A, b)
    assert np.linalg.norm(A @ x - b) < 1e-12


def test_solve_linear_singular():
    with pytest.raises(nm.SingularMatrixError):
        nm.solve_linear(np.ones((3, 3)), np.ones(3))


def test_find_root():
    assert nm.find_root_bracketed(lambda x: x - 1.0, (0.0, 3.0)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        nm.find_root_bracketed(lambda x: x * x + 1, (-1.0, 1.0))


def test_maximize_quadratic():
    x, v = nm.maximize_1d(lambda x: -(x - 1.0) ** 2, (-3.0, 4.0), tol=1e-9)
    assert x == pytest.approx(1.0, abs=1e-6)
    assert v == pytest.approx(0.0, abs=1e-10)


def test_maximize_multimodal_finds_global():
    f = lambda x: np.exp(-(x + 2) ** 2) + 1.5 * np.exp(-(x - 3) ** 2 / 0.1)
    x, _ = nm.maximize_1d(f, (-6.0, 6.0), n_scan=801)
    assert x == pytest.approx(3.0, abs=1e-4)


def test_maximize_tie_break_right():
    x, _ = nm.maximize_1d(lambda x: 1.0, (0.0, 1.0), n_scan=11)
    assert x == 1.0
    x, _ = nm.maximize_1d(lambda x: 1.0, (0.0, 1.0), n_scan=11, prefer="left")
    assert x == 0.0


def test_filon_exact_for_linear_envelope():
    h = 0.05
    t = np.arange(201) * h
    q = 1.0 + 0.3 * t
    f = 7.3
    T = t[-1]
    # int_0^T (1 + a t) e^{ift} dt in closed form
    a = 0.3
    e = np.exp(1j * f * T)
    exact = (e - 1) / (1j * f) + a * (e * (T / (1j * f) + 1 / f**2) - 1 / f**2)
    got = nm.filon_integral(q, h, [f])[0]
    assert abs(got - exact) < 1e-11


def test_filon_chirp_path_matches_blocks():
    rng = np.random.default_rng(0)
    h = 0.02
    q = rng.normal(size=(300, 2)) + 1j * rng.normal(size=(300, 2))
    freqs = np.linspace(-20, 20, 401)
    fast = nm.filon_integral(q, h, freqs)
    slow = np.stack([nm.filon_integral(q, h, [f])[0] for f in freqs])
    assert np.max(np.abs(fast - slow)) < 1e-9


def test_filon_weights_match_integral():
    h = 0.1
    q = np.cos(np.arange(50) * h)
    w = nm.filon_weights(50, h, 2.0 + 0.1j)
    assert abs(w @ q - nm.filon_integral(q, h, [2.0 + 0.1j])[0]) < 1e-12


@pytest.mark.parametrize("lam,carrier,h", [(1.0, 0.0, 0.1), (0.5 + 2j, 3.0, 0.01), (1e-6, 1e-3, 1e-3)])
def test_phi_weights_exact_for_pure_carrier(lam, carrier, h):
    # y' = -lam y + exp(-i c t), y(0) = 0
    c, w0, w1 = nm.phi_weights(lam, carrier, h)
    exact = (np.exp(-1j * carrier * h) - np.exp(-lam * h)) / (lam - 1j * carrier)
    assert abs(w0 + w1 * np.exp(-1j * carrier * h) - exact) < 1e-12 * max(1.0, abs(exact)) + 1e-15
    assert c == pytest.approx(np.exp(-lam * h))


def test_delay_system_scalar_against_steps():
    # y' = -y + y(t-1): on [0,1] y = e^{-t}; on [1,2] y = e^{-t}(1 + (t-1)e)
    t, y = nm.solve_delay_system(np.array([-1.0]), [(1.0, np.array([[1.0]]))], np.array([1.0]), 2.0, 0.01)
    exact = np.where(t <= 1, np.exp(-t), np.exp(-t) * (1 + (t - 1) * math.e))
    assert np.max(np.abs(y[:, 0, 0] - exact)) < 1e-8


def test_spectrum_to_time_gaussian():
    dw = 0.01
    w = np.arange(-20, 20 + dw / 2, dw)
    F = np.exp(-w**2 / 2)
    t, G = nm.spectrum_to_time(F, w[0], dw)
    sel = np.abs(t) < 5
    assert np.max(np.abs(G[sel] - math.sqrt(2 * math.pi) * np.exp(-t[sel] ** 2 / 2))) < 1e-10
