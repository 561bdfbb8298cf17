import math

import numpy as np
import pytest

from boundtrap import scatter as sc
from boundtrap.model import feedback_system

W0 = math.pi / 2


@pytest.fixture(scope="module")
def bound(single_solver):
    return single_solver.upper_bound(0)


def test_upper_bound_long_delay(bound):
    p_ub, Om = bound
    assert 0.97 < p_ub < 0.99
    assert Om - 2 * W0 == pytest.approx(0.93, abs=0.05)


def test_finite_width_ordered_below_bound(single_solver, bound):
    p_ub, Om = bound
    P = [single_solver.structured_probability(single_solver.optimal_packet(0, d, Om))[0] for d in (0.4, 0.2, 0.1)]
    assert P[0] <= P[1] <= P[2] <= p_ub + 1e-6
    assert P[2] > 0.95


def test_short_delay_barely_traps():
    sol = sc.TrapSolver.build(feedback_system(math.pi / 0.1, 1.0, 0.1))
    assert sol.upper_bound(0)[0] < 0.05


def test_grid_route_matches_structured_route(single_solver):
    pk = single_solver.optimal_packet(0, 0.4, 2 * W0 + 0.926)
    nu = np.arange(W0 + 0.46 - 20, W0 + 0.46 + 20, 0.05)
    g = sc.GridPacket(nu, pk.amplitude(single_solver.table, nu[:, None], nu[None, :]))
    assert g.norm2() == pytest.approx(1.0, abs=1e-4)
    assert single_solver.grid_probability(g)[0] == pytest.approx(single_solver.structured_probability(pk)[0], abs=1e-4)


def test_gram_matrix_routes_agree(pair_solver):
    Om = pair_solver.envelope_grid(4 * math.pi + 2.4, 0.15)[::7]
    fast = pair_solver.x_matrices(Om)
    slow = pair_solver.x_direct(Om)
    # the convolution keeps only pairs with both photons inside the window
    assert np.max(np.abs(fast - slow)) < 1e-3 * np.max(np.abs(slow))


def test_mixture_norm_closed_form_vs_grid():
    rng = np.random.default_rng(5)
    pk = sc.random_mixture_packet(rng, 3.0, detuning=1.0, spread=2.0)
    assert pk.norm2() == pytest.approx(1.0)
    nu = np.arange(-4.0, 10.0, 0.01)
    assert pk.to_grid(nu).norm2() == pytest.approx(1.0, abs=1e-8)


def test_gaussian_envelope_normalized():
    Om = np.linspace(-5, 5, 20001)
    assert np.trapezoid(sc.gaussian_envelope(Om, 0.3, 0.4) ** 2, Om) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("target", [[1, 0], [0, 1], [1, 1], [1, 1j]])
def test_design_reaches_target(pair_solver, target):
    t = np.asarray(target, dtype=complex)
    t /= np.linalg.norm(t)
    res = pair_solver.design(t, 4 * math.pi + 2.4, 0.15)
    assert res.fidelity == pytest.approx(1.0, abs=1e-10)
    rho = pair_solver.structured_density(res.packet)
    assert sc.fidelity(rho, t) > 0.95


def test_design_rejects_bad_inputs(pair_solver):
    with pytest.raises(ValueError):
        pair_solver.design(np.ones(3), 4 * math.pi + 2.4, 0.15)
    with pytest.raises(ValueError):
        pair_solver.design(np.zeros(2), 4 * math.pi + 2.4, 0.15)
    with pytest.raises(sc.IllConditionedError):
        pair_solver.design(np.array([1, 0]), 4 * math.pi + 2.4, 0.15, cond_limit=1.0)


def test_pole_guard(single_solver):
    wb = float(single_solver.table.omega_b[0])
    with pytest.raises(sc.PoleProximityError):
        sc.t_matrix(single_solver.green, 2 * wb)
    assert np.all(single_solver.t_inverse(np.array([2 * wb])) == 0)


def test_t_matrix_against_damped_extrapolation(single_solver):
    g = single_solver.green
    Om = 2 * float(g.omega_b[0]) + np.array([-3.1, -0.7, 0.8, 2.5])
    ref = sc.t_matrices(g, Om)
    orc = sc.t_matrix_eta_oracle(g, Om)
    assert np.max(np.abs(orc - ref) / np.abs(ref)) < 1e-4


def test_fidelity_helper():
    rho = np.array([[0.5, 0.5], [0.5, 0.5]])
    assert sc.fidelity(rho, np.array([1, 1])) == pytest.approx(1.0)
    assert sc.fidelity(rho, np.array([1, -1])) == pytest.approx(0.0)


def test_functional_api(single_solver):
    pk = sc.optimal_wavepacket(single_solver, 0, 0.3, 2 * W0 + 0.9)
    assert sc.trapping_probability(single_solver, 0, pk) == pytest.approx(single_solver.structured_probability(pk)[0])
    with pytest.raises(TypeError):
        sc.trapping_probability(single_solver, 0, sc.random_mixture_packet(np.random.default_rng(0), 2.0))
    with pytest.raises(ValueError):
        single_solver.optimal_packet(0, 0.0, 3.0)
