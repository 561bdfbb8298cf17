import math

import numpy as np
import pytest

from boundtrap import spectral as sp
from boundtrap.model import SystemSpec, feedback_system

# Single emitter, gamma = 1, t_d = 2, omega_0 = pi/2; overlaps from the
# closed-form resonance expression, evaluated once and frozen.
XI_FROZEN = {
    -3.0: -0.00213576 + 0.05517984j,
    0.2: -0.18158343 + 0.39121841j,
    1.0: -0.26678393 + 0.2141828j,
    math.pi / 2: 0.31915382j,
    2.9: 0.36142352 + 0.42393205j,
    7.5: -0.01746169 - 0.10201758j,
}


def test_xi_matches_frozen_values(single):
    table = sp.overlaps(single, sp.find_bound_states(single), n_grid=3)
    w = np.array(list(XI_FROZEN))
    got = table.xi(w)[:, 0]
    assert np.max(np.abs(got - np.array(list(XI_FROZEN.values())))) < 1e-8


@pytest.mark.parametrize("gtd", [0.1, 0.5, 1.0, 2.0, 4.0])
def test_single_overlap_closed_form(gtd):
    s = feedback_system(math.pi / gtd, 1.0, gtd)
    states = sp.find_bound_states(s)
    assert len(states) == 1
    assert abs(states[0].v[0]) == pytest.approx(1 / math.sqrt(1 + 2 * gtd), abs=1e-10)
    assert states[0].omega_b == pytest.approx(math.pi / gtd, abs=1e-12)


def test_bound_state_norm_by_quadrature(single):
    b = sp.find_bound_states(single)[0]
    x = np.linspace(-2.5, 2.5, 500001)
    photon = np.trapezoid(np.abs(sp.bound_state_profile(b, x)) ** 2, x)
    assert abs(b.v[0]) ** 2 + photon == pytest.approx(1.0, abs=1e-5)
    assert np.max(np.abs(sp.bound_state_profile(b, np.array([-3.0, 3.0])))) < 1e-12


@pytest.mark.parametrize("sysname", ["single", "pair"])
def test_unit_transmission(sysname, request):
    s = request.getfixturevalue(sysname)
    for w in np.linspace(*s.frequency_window, 101):
        assert abs(abs(sp.solve_scattering_state(s, w).tau) - 1) < 1e-10


def test_scattering_state_layout(single):
    st = sp.solve_scattering_state(single, 1.0)
    assert st.segment_coeffs[0] == 1
    assert st.segment_coeffs[-1] == pytest.approx(st.tau)
    assert st.tau == pytest.approx(-0.21614554571350442 - 0.9763611540143388j, abs=1e-10)


def test_pair_orthonormal_states(pair):
    states = sp.find_bound_states(pair)
    assert len(states) == 2
    G = np.array([[sp.bound_inner_product(a, b) for b in states] for a in states])
    assert np.max(np.abs(G - np.eye(2))) < 1e-10


def test_bound_scattering_orthogonal(pair):
    states = sp.find_bound_states(pair)
    for w in (3.0, 6.0, 2 * math.pi + 0.3, 9.0):
        st = sp.solve_scattering_state(pair, w)
        for b in states:
            assert abs(sp.bound_scattering_overlap(b, st)) < 1e-8


def test_detuned_single_has_no_bound_state():
    s = feedback_system((math.pi + 0.02) / 2.0, 1.0, 2.0)
    res = sp.find_bound_states(s, return_search=True)
    assert res.states == []


def test_non_commensurate_pair_has_one_or_fewer():
    s = feedback_system([2 * math.pi, 2 * math.pi + 0.7], [1.0, 0.6], [0.5, 1.3])
    assert len(sp.find_bound_states(s)) < 2


def test_completeness_with_tail(single):
    table = sp.overlaps(single, sp.find_bound_states(single), n_grid=3)
    rep = sp.completeness(table)
    assert np.max(np.abs(rep.total - 1)) < 1e-6
    # the window alone misses a few percent of continuum weight
    assert 1e-3 < 1 - rep.windowed[0] < 0.1


def test_custom_coupling_reproduces_mirror_bound_state(single):
    td = float(single.delays[0])
    custom = SystemSpec(single.emitters, "custom", None, custom_coupling=lambda n, w: 2j * np.sin(w * td))
    states = sp.find_bound_states(custom, n_grid=101)
    assert len(states) == 1
    assert states[0].omega_b == pytest.approx(math.pi / 2, abs=1e-6)
    # the principal value is truncated to the window, hence the loose tolerance
    assert abs(states[0].v[0]) == pytest.approx(1 / math.sqrt(5), abs=1e-2)


def test_invalid_system_rejected():
    with pytest.raises(ValueError):
        sp.find_bound_states(SystemSpec(()))
