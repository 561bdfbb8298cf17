import math

import numpy as np
import pytest

from boundtrap import fdtd
from boundtrap.model import feedback_system
from boundtrap.numerics import phi_weights
from boundtrap.scatter import TrapSolver, random_mixture_packet


def dense_reference(system, lattice, psi0, P0, A0):
    """Full-matrix time stepping of the same lattice scheme.

    The two-photon field is stored in full and receives row and column jumps
    directly; coupling rows are read back from it after the jumps with only
    the emitter's own row jump removed.
    """
    h, K = lattice.h, lattice.K
    N = system.n
    L = np.rint(system.delays / h).astype(int)
    sg = np.sqrt(system.gammas)
    w = system.omegas
    g = system.gammas
    psi = psi0.astype(complex).copy()
    P = P0.astype(complex).copy()
    A = A0.astype(complex).copy()
    c1 = [phi_weights(1j * w[n] + g[n], w[n], h) for n in range(N)]
    cA = {(m, n): phi_weights(1j * (w[m] + w[n]) + g[m] + g[n], w[m] + w[n], h)
          for m in range(N) for n in range(N) if m != n}

    def dvec(P, k):
        D = np.zeros((N, N), complex)
        for m in range(N):
            for n in range(N):
                if m != n:
                    D[m, n] = 0.5 * (sg[n] * (P[m, K - L[n] - k] - P[m, K + L[n] - k])
                                     + sg[m] * (P[n, K - L[m] - k] - P[n, K + L[m] - k]))
        return D

    for k in range(lattice.n_steps):
        pa, pb = K - L - k, K + L - k
        D = dvec(P, k)
        jumps = [(n, m, -2j * sg[m] * A[m, n], 2j * sg[m] * A[m, n]) for n in range(N) for m in range(N) if m != n]
        for n, m, ja, jb in jumps:
            P[n, pa[m]] += 0.5 * ja
            P[n, pb[m]] += 0.5 * jb
        Pmid = P.copy()
        for n in range(N):
            for p, c in ((pa[n], -0.5j * sg[n]), (pb[n], 0.5j * sg[n])):
                psi[p, :] += c * Pmid[n]
                psi[:, p] += c * Pmid[n]
        for n, m, ja, jb in jumps:
            P[n, pa[m]] += 0.5 * ja
            P[n, pb[m]] += 0.5 * jb
        R = np.array([psi[pa[n]] - psi[pb[n]] - (-1j * sg[n]) * Pmid[n] for n in range(N)])
        Rn = np.array([psi[pa[n] - 1] - psi[pb[n] - 1] for n in range(N)])
        for n in range(N):
            c, w0, w1 = c1[n]
            P[n] = c * P[n] - 2j * sg[n] * (w0 * R[n] + w1 * Rn[n])
        Dn = dvec(P, k + 1)
        for (m, n), (c, w0, w1) in cA.items():
            A[m, n] = c * A[m, n] - 1j * (w0 * D[m, n] + w1 * Dn[m, n])
    iu = np.triu_indices(N, 1)
    norm = 2 * h**2 * np.sum(np.abs(psi) ** 2) + h * np.sum(np.abs(P) ** 2) + 4 * np.sum(np.abs(A[iu]) ** 2)
    return psi, P, A, norm


@pytest.fixture(scope="module")
def small_pair_run():
    system = feedback_system([2 * math.pi, 2 * math.pi + 0.4], [1.0, 0.7], [0.5, 1.0])
    h = 0.05
    K = 120
    lat = fdtd.Lattice(h, K, K + 23, K - 22)
    rng = np.random.default_rng(1)
    x = lat.x
    blob = np.exp(-((x + 2.8) ** 2) / 0.2)[:, None] * np.exp(-((x + 3.0) ** 2) / 0.3)[None, :]
    blob = blob * np.exp(1j * 4 * (x[:, None] + x[None, :]))
    psi0 = blob + blob.T + 0.05 * rng.normal(size=blob.shape) * (np.abs(blob + blob.T) > 1e-3)
    psi0 = 0.5 * (psi0 + psi0.T)
    fld = fdtd.ArrayField(psi0)
    st = fdtd.init_from_wavepacket(fld, lat, system, record_history=True, dtype=np.complex128)
    # seed the emitters too so every coupling is exercised
    st.psi1[0] = 0.3 * np.exp(-((x + 1.8) ** 2) / 0.1)
    st.psi1[1] = 0.2j * np.exp(-((x - 0.3) ** 2) / 0.1)
    st.psiE[0, 1] = st.psiE[1, 0] = 0.1 - 0.05j
    P0, A0 = st.psi1.copy(), st.psiE.copy()
    start = fld.rows(lat, np.arange(lat.n_x))
    st.batch = 7  # exercise the ring-buffer refill
    with pytest.warns(RuntimeWarning, match="doubly excited"):
        fdtd.run(st)
    ref = dense_reference(system, lat, start, P0, A0)
    return st, ref


def test_kernel_matches_dense_reference(small_pair_run):
    st, (psi, P, A, _) = small_pair_run
    assert np.max(np.abs(st.psi1 - P)) < 1e-10
    assert np.max(np.abs(st.psiE - A)) < 1e-10
    full = st.psi2_rows(np.arange(st.lattice.n_x))
    assert np.max(np.abs(full - psi)) < 1e-10


def test_norm_bookkeeping_matches_dense_reference(small_pair_run):
    st, (*_, norm) = small_pair_run
    assert st.norm() == pytest.approx(norm, abs=1e-10)


def test_history_reconstruction(small_pair_run):
    st, (psi, *_) = small_pair_run
    rng = np.random.default_rng(2)
    for i1, i2 in rng.integers(0, st.lattice.n_x, size=(25, 2)):
        assert abs(fdtd.eval_psi2(st, int(i1), int(i2)) - psi[i1, i2]) < 1e-10


def test_history_at_start_is_initial_field(small_pair_run):
    st, _ = small_pair_run
    rows = st.field.rows(st.lattice, np.array([60, 70]))
    assert fdtd.eval_psi2(st, 60, 75, k=0) == rows[0, 75]
    assert fdtd.eval_psi2(st, 70, 62, k=0) == rows[1, 62]


def test_history_required():
    system = feedback_system(math.pi, 1.0, 1.0)
    lat = fdtd.Lattice(0.1, 40, 55, 20)
    st = fdtd.init_from_wavepacket(fdtd.ZeroField(), lat, system)
    with pytest.raises(ValueError):
        fdtd.eval_psi2(st, 0, 0)


def test_decay_and_feedback_revival():
    """An excited emitter next to a far-away spectator photon.

    The spectator never meets a coupling point, so the emitter amplitude
    follows the mirror delay equation e' = -(i w + g) e + g e(t - 2 t_d):
    pure decay up to 2 t_d, then e(t) = exp(-lam t) [1 + g (t - 2 t_d) exp(2 lam t_d)].
    The emitter is switched on abruptly, so the first lattice cell of
    emitted light covers only half a step and the revival starts h/2 early.
    """
    g, td = 1.0, 1.0
    w0 = math.pi / td
    system = feedback_system(w0, g, td)
    errs = []
    for h in (0.02, 0.01):
        L = int(round(td / h))
        K = int(round(9 / h))
        lat = fdtd.Lattice(h, K, K + L + 5, int(round(3.6 / h)))
        st = fdtd.init_from_wavepacket(fdtd.ZeroField(), lat, system, dtype=np.complex128)
        chi = np.exp(-((lat.x + 7.0) ** 2) / 0.5)
        st.psi1[0] = chi
        i = int(np.argmax(chi))
        lam = 1j * w0 + g
        worst = 0.0
        for t in (1.0, 1.9, 2.0, 2.5, 3.0, 3.5):
            st.advance(int(round(t / h)) - st.k)
            e = np.exp(-lam * t)
            if t >= 2 * td:
                e = e * (1 + g * (t - 2 * td + h / 2) * np.exp(2 * lam * td))
            worst = max(worst, abs(st.psi1[0, i] / chi[i] - e))
        errs.append(worst)
    assert errs[1] < 5e-5
    assert errs[1] < 0.3 * errs[0]


def test_causality_compact_field():
    system = feedback_system(math.pi, 1.0, 1.0)
    h = 0.05
    K = 200
    lat = fdtd.Lattice(h, K, K + 24, K - 22)
    x = lat.x
    f = np.exp(-((x + 6.0) ** 2) / 0.1)
    f[np.abs(x + 6.0) > 1.0] = 0.0
    st = fdtd.init_from_wavepacket(fdtd.ArrayField(np.outer(f, f)), lat, system, dtype=np.complex128)
    # the left coupling point -t_d - t reaches the field edge x = -5 at t = 4
    st.advance(int(round(3.9 / h)))
    assert np.all(st.psi1 == 0)
    st.advance(int(round(0.5 / h)))
    assert np.any(st.psi1 != 0)


def test_zero_state_stays_zero():
    system = feedback_system(2 * math.pi, 1.0, [0.5, 1.0])
    lat = fdtd.plan_lattice(system, fdtd.ZeroField(), 0.05, 0.0, length=5.0)
    st = fdtd.init_from_wavepacket(fdtd.ZeroField(), lat, system)
    fdtd.run(st)
    assert np.all(st.psi1 == 0) and np.all(st.psiE == 0) and np.all(st.S == 0)
    assert st.norm() == 0


def test_lattice_errors():
    system = feedback_system(math.pi, 1.0, 1.0)
    with pytest.raises(fdtd.LatticeError):
        fdtd.Lattice(0.3, 40, 60, 10).check(system)  # delay not a multiple of h
    with pytest.raises(fdtd.LatticeError):
        fdtd.Lattice(0.1, 40, 45, 10).check(system)  # right coupling point off the lattice
    with pytest.raises(fdtd.LatticeError):
        fdtd.Lattice(0.1, 40, 60, 40).check(system)  # runs off the left edge
    lat = fdtd.Lattice(0.1, 40, 60, 20)
    st = fdtd.init_from_wavepacket(fdtd.ZeroField(), lat, system)
    with pytest.raises(fdtd.LatticeError):
        st.advance(21)


def test_initial_field_must_clear_coupling_region():
    sol = TrapSolver.build(feedback_system(math.pi, 1.0, 1.0))
    pk = random_mixture_packet(np.random.default_rng(0), math.pi, spread=0.0)
    fld = fdtd.MixtureField(pk, shift=0.0)
    lat = fdtd.Lattice(0.05, 400, 425, 370)
    with pytest.raises(fdtd.LatticeError):
        fdtd.init_from_wavepacket(fld, lat, sol.system)
    fld = fdtd.MixtureField(pk, shift=-100.0)
    with pytest.raises(fdtd.LatticeError):
        fdtd.init_from_wavepacket(fld, lat, sol.system)


def test_structured_field_norm_routes_agree(single_solver):
    pk = single_solver.optimal_packet(0, 0.5, math.pi + 0.95)
    fld = fdtd.StructuredField(single_solver, pk, 0.05)
    lat = fdtd.plan_lattice(single_solver.system, fld, 0.05, 5.0)
    rows = fld.rows(lat, np.arange(lat.n_x))
    assert np.allclose(rows, rows.T, atol=1e-12)
    assert fld.norm2(lat) == pytest.approx(lat.h**2 * np.sum(np.abs(rows) ** 2), rel=1e-9)
    # the lattice norm approximates the continuum norm 1/2 of a unit packet
    assert fld.norm2(lat) == pytest.approx(0.5, abs=5e-3)


def test_single_emitter_extraction(single_solver):
    pk = single_solver.optimal_packet(0, 0.5, math.pi + 0.95)
    st, ex = fdtd.simulate(single_solver, pk, h=0.02)
    eps = single_solver.table.eps[0, 0]
    direct = st.lattice.h * np.sum(np.abs(st.psi1[0]) ** 2) / abs(eps) ** 2
    assert ex.probabilities[0] == pytest.approx(direct, rel=1e-12)
    assert ex.residual < 1e-12
    assert ex.probabilities[0] == pytest.approx(single_solver.structured_probability(pk)[0], abs=0.02)
    assert np.all(np.diag(st.psiE) == 0)


def test_drift_falls_with_step(single_solver):
    pk = single_solver.optimal_packet(0, 0.5, math.pi + 0.95)
    drift = []
    for h in (0.04, 0.02):
        st, _ = fdtd.simulate(single_solver, pk, h=h, dtype=np.complex128)
        drift.append(abs(st.norms[-1][1] - st.norms[0][1]))
    assert drift[1] <= 0.5 * drift[0]


def test_extraction_rank_check():
    system = feedback_system(math.pi, 1.0, 1.0)
    lat = fdtd.Lattice(0.1, 40, 60, 20)
    st = fdtd.init_from_wavepacket(fdtd.ZeroField(), lat, system)
    with pytest.raises(np.linalg.LinAlgError):
        fdtd.extract_trapping(st, np.zeros((1, 1)))
    assert fdtd.extract_trapping(st, np.zeros((0, 1))).probabilities.size == 0
