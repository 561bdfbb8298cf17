"""Invariant checks shared by the ``validate`` command and the acceptance tests.

Every check returns a :class:`CheckResult`; none of them raises on a failed
comparison, so a suite always reports every line.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from .model import feedback_system
from .scatter import TrapSolver, random_mixture_packet, t_matrices, t_matrix_eta_oracle
from .spectral import (
    bound_inner_product,
    bound_scattering_overlap,
    completeness,
    find_bound_states,
    overlaps,
    scattering_overlap,
    solve_scattering_state,
)

__all__ = [
    "CheckResult",
    "CHECKS",
    "DEFAULT_CHECKS",
    "run_checks",
    "closed_form_xi",
    "reference_single",
    "reference_pair",
]


@dataclass
class CheckResult:
    """Outcome of one invariant check.

    Attributes:
        name: Check identifier.
        passed: Whether every comparison met its threshold.
        metric: Worst observed deviation (or the quantity compared).
        threshold: Acceptance threshold for ``metric``.
        runtime: Wall time in seconds.
        details: Free-form diagnostics (JSON-serializable).
    """

    name: str
    passed: bool
    metric: float
    threshold: float
    runtime: float = 0.0
    details: dict[str, Any] = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: metric={self.metric:.3e} threshold={self.threshold:.1e} ({self.runtime:.1f}s)"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def reference_single(gamma_td: float = 2.0, gamma: float = 1.0, phase_index: int = 1):
    """One emitter with ``omega t_d = phase_index * pi`` (a bound state exists)."""
    td = gamma_td / gamma
    return feedback_system(phase_index * math.pi / td, gamma, td)


def reference_pair(delays=(0.5, 1.0), omega0: float = 2 * math.pi, gamma: float = 1.0):
    """Two degenerate emitters with delays commensurate with ``omega0``."""
    return feedback_system(omega0, gamma, list(delays))


def closed_form_xi(omega: np.ndarray, omega0: float, gamma: float, td: float) -> np.ndarray:
    """Independent single-emitter scattering overlap in closed form.

    ``2i sqrt(g) sin(w t) / (w - w0 + 2 g sin(w t) exp(-i w t))``, conjugated and
    divided by ``sqrt(2 pi)``; at ``w = w0`` (where ``w0 t`` is a multiple of pi)
    the 0/0 is replaced by its limit ``2i sqrt(g) t cos(w0 t) / (1 + 2 g t)``.
    """
    w = np.asarray(omega, dtype=float)
    s = np.sin(w * td)
    num = 2j * math.sqrt(gamma) * s
    den = w - omega0 + 2 * gamma * s * np.exp(-1j * w * td)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = num / den
    at = np.abs(w - omega0) < 1e-12 * max(1.0, abs(omega0))
    val = np.where(at, 2j * math.sqrt(gamma) * td * math.cos(omega0 * td) / (1 + 2 * gamma * td), val)
    return np.conj(val) / math.sqrt(2 * math.pi)


def _timed(fn: Callable[..., CheckResult]) -> Callable[..., CheckResult]:
    def wrapper(*args, **kwargs) -> CheckResult:
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.runtime = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_overlap_closed_form(gamma_tds=(0.1, 0.5, 1.0, 2.0, 4.0), n_grid: int = 1001, **_) -> CheckResult:
    """Single-emitter overlaps against ``1/sqrt(1 + 2 g t)`` and the closed-form ``xi``."""
    eps_err = 0.0
    xi_err = 0.0
    rows = []
    for gtd in gamma_tds:
        s = reference_single(gtd)
        states = find_bound_states(s)
        table = overlaps(s, states, n_grid=3)
        e = abs(table.eps[0, 0]) if table.n_bound == 1 else math.nan
        target = 1 / math.sqrt(1 + 2 * gtd)
        eps_err = max(eps_err, abs(e - target)) if math.isfinite(e) else math.inf
        lo, hi = s.frequency_window
        w = np.linspace(lo, hi, n_grid)
        got = table.xi(w)[:, 0]
        ref = closed_form_xi(w, s.omegas[0], s.gammas[0], s.delays[0])
        err = float(np.max(np.abs(got - ref)))
        xi_err = max(xi_err, err)
        rows.append({"gamma_td": gtd, "epsilon": e, "closed_form": target, "xi_max_error": err})
    passed = eps_err <= 1e-10 and xi_err <= 1e-8
    return CheckResult("overlap_closed_form", passed, max(eps_err, xi_err), 1e-8,
                       details={"epsilon_error": eps_err, "xi_error": xi_err, "rows": rows})


@_timed
def check_unitarity(n_grid: int = 1001, **_) -> CheckResult:
    """``|tau| = 1`` on the frequency window for one and two emitters."""
    worst = 0.0
    per = {}
    for label, s in (("N=1", reference_single(2.0)), ("N=2", reference_pair()),
                     ("N=2 detuned", feedback_system([2 * math.pi, 2 * math.pi + 0.7], [1.0, 0.6], [0.5, 1.3]))):
        w = np.linspace(*s.frequency_window, n_grid)
        tau = np.array([solve_scattering_state(s, x).tau for x in w])
        err = float(np.max(np.abs(np.abs(tau) - 1)))
        per[label] = err
        worst = max(worst, err)
    return CheckResult("unitarity", worst <= 1e-10, worst, 1e-10, details=per)


@_timed
def check_orthonormality(n_samples: int = 25, seed: int = 0, **_) -> CheckResult:
    """Bound-bound, bound-scattering, scattering-scattering and completeness identities."""
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}
    for label, s in (("N=1", reference_single(2.0)), ("N=2", reference_pair())):
        states = find_bound_states(s)
        bb = max((abs(bound_inner_product(a, b) - (1.0 if i == j else 0.0))
                  for i, a in enumerate(states) for j, b in enumerate(states)), default=0.0)
        lo, hi = s.frequency_window
        ws = rng.uniform(lo, hi, size=n_samples)
        scat = [solve_scattering_state(s, w) for w in ws]
        bs = max(abs(bound_scattering_overlap(b, sc)) for b in states for sc in scat)
        ss = max(abs(scattering_overlap(scat[i], scat[i + 1], s.delays)) for i in range(n_samples - 1))
        rep = completeness(overlaps(s, states, n_grid=3))
        out[f"{label} bound-bound"] = float(bb)
        out[f"{label} bound-scattering"] = float(bs)
        out[f"{label} scattering-scattering"] = float(ss)
        out[f"{label} completeness"] = float(np.max(np.abs(rep.total - 1)))
        out[f"{label} completeness (window only)"] = float(np.max(np.abs(rep.windowed - 1)))
    strict = [v for k, v in out.items() if "window only" not in k]
    worst = max(strict)
    return CheckResult("orthonormality", worst <= 1e-6, worst, 1e-6, details=out)


@_timed
def check_bound_count(**_) -> CheckResult:
    """Two states for the degenerate pair; none for a slightly detuned emitter."""
    deg = find_bound_states(reference_pair(), return_search=True)
    td = 2.0
    detuned = feedback_system((math.pi + 0.02) / td, 1.0, td)
    det = find_bound_states(detuned, return_search=True)
    ok = len(deg.states) == 2 and len(det.states) == 0
    return CheckResult("bound_count", ok, float(abs(len(deg.states) - 2) + len(det.states)), 0.0,
                       details={"degenerate_pair": len(deg.states), "detuned_single": len(det.states),
                                "rejected": det.rejected})


def _packet_grid(center: float, detuning: float, sigma_max: float, d_nu: float = 0.02) -> np.ndarray:
    half = detuning + 7 * sigma_max
    return np.arange(center - half, center + half + d_nu / 2, d_nu)


@_timed
def check_cauchy_schwarz(n_packets: int = 50, seed: int = 0, **_) -> CheckResult:
    """Random normalized packets never beat the per-state upper bound."""
    rng = np.random.default_rng(seed)
    worst = -math.inf
    per = {}
    for label, s in (("N=1", reference_single(2.0)), ("N=2", reference_pair())):
        sol = TrapSolver.build(s)
        ub = np.array([sol.upper_bound(a)[0] for a in range(sol.n_bound)])
        w0 = float(s.omegas[0])
        nu = _packet_grid(w0 + 0.5, 1.0, 1.0)
        excess = -math.inf
        for _ in range(n_packets):
            pk = random_mixture_packet(rng, w0 + 0.5, detuning=1.0, sigma_range=(0.3, 1.0), spread=3.0)
            P = sol.grid_probability(pk.to_grid(nu).normalized())
            excess = max(excess, float(np.max(P - ub)))
        per[label] = {"P_ub": ub.tolist(), "max_excess": excess}
        worst = max(worst, excess)
    return CheckResult("cauchy_schwarz", worst <= 1e-6, worst, 1e-6, details=per)


@_timed
def check_t_matrix_oracle(n_samples: int = 20, seed: int = 0, **_) -> CheckResult:
    """Damped-integral extrapolation against the split T-matrix at off-pole energies."""
    rng = np.random.default_rng(seed)
    s = reference_single(2.0)
    sol = TrapSolver.build(s)
    g = sol.green
    pole = 2 * float(g.omega_b[0])
    D = rng.uniform(0.5, 4.0, size=n_samples) * rng.choice([-1.0, 1.0], size=n_samples)
    Om = pole + D
    ref = t_matrices(g, Om)
    orc = t_matrix_eta_oracle(g, Om)
    rel = np.abs(orc - ref).reshape(n_samples, -1).max(axis=1) / np.abs(ref).reshape(n_samples, -1).max(axis=1)
    worst = float(rel.max())
    return CheckResult("t_matrix_oracle", worst <= 1e-4, worst, 1e-4,
                       details={"Omega": Om.tolist(), "relative_error": rel.tolist()})


@_timed
def check_fdtd_oracle(h: float = 0.01, seed: int = 0, **_) -> CheckResult:
    """Time-domain trapping probabilities against scattering theory, plus drift scaling.

    Ten designed packets (single-emitter optimal inputs and two-emitter
    superposition designs) and ten random Gaussian mixtures; all at lattice
    step ``h``. The drift check reruns one packet at ``2h``.
    """
    from . import fdtd

    rng = np.random.default_rng(seed)
    rows = []
    worst = 0.0
    s1 = reference_single(2.0)
    sol1 = TrapSolver.build(s1)
    w1 = float(s1.omegas[0])
    s2 = reference_pair()
    sol2 = TrapSolver.build(s2)
    w2 = float(s2.omegas[0])

    def compare(label, sol, packet, predicted):
        nonlocal worst
        st, ex = fdtd.simulate(sol, packet, h=h)
        err = float(np.max(np.abs(ex.probabilities - predicted)))
        worst = max(worst, err)
        rows.append({"packet": label, "scatter": np.asarray(predicted).tolist(),
                     "fdtd": ex.probabilities.tolist(), "drift": st.norms[-1][1] - st.norms[0][1]})
        return st

    designed = [(0.4, 0.95), (0.3, 0.95), (0.4, 0.5), (0.3, 1.4), (0.5, 0.8)]
    for Delta, det in designed:
        pk = sol1.optimal_packet(0, Delta, 2 * w1 + det)
        compare(f"N=1 optimal Delta={Delta} detuning={det}", sol1, pk, sol1.structured_probability(pk))
    for tgt, det in (([1, 0], 2.4), ([0, 1], 2.4), ([1, 1], 2.4), ([1, -1], 2.0), ([1, 1j], 2.8)):
        t = np.asarray(tgt, dtype=complex)
        t /= np.linalg.norm(t)
        r = sol2.design(t, 2 * w2 + det, 0.3)
        compare(f"N=2 design target={tgt} detuning={det}", sol2, r.packet, sol2.structured_probability(r.packet))
    for i in range(10):
        sol, w = (sol1, w1) if i % 2 == 0 else (sol2, w2)
        pk = random_mixture_packet(rng, w + 0.5, detuning=1.0, sigma_range=(0.3, 1.0), spread=3.0)
        nu = _packet_grid(w + 0.5, 1.0, 1.0, d_nu=0.01)
        compare(f"random #{i} N={sol.system.n}", sol, pk, sol.grid_probability(pk.to_grid(nu).normalized()))
    # drift scaling
    pk = sol1.optimal_packet(0, 0.4, 2 * w1 + 0.95)
    drifts = []
    for hh in (2 * h, h):
        st, _ = fdtd.simulate(sol1, pk, h=hh)
        drifts.append(abs(st.norms[-1][1] - st.norms[0][1]))
    ratio = drifts[1] / drifts[0] if drifts[0] > 0 else 0.0
    passed = worst <= 0.02 and ratio <= 0.5
    return CheckResult("fdtd_oracle", passed, worst, 0.02,
                       details={"packets": rows, "drift_coarse": drifts[0], "drift_fine": drifts[1],
                                "drift_ratio": ratio})


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "overlap_closed_form": check_overlap_closed_form,
    "unitarity": check_unitarity,
    "orthonormality": check_orthonormality,
    "bound_count": check_bound_count,
    "cauchy_schwarz": check_cauchy_schwarz,
    "t_matrix_oracle": check_t_matrix_oracle,
    "fdtd_oracle": check_fdtd_oracle,
}

DEFAULT_CHECKS = ("overlap_closed_form", "unitarity", "orthonormality", "bound_count", "cauchy_schwarz",
                  "t_matrix_oracle")


def run_checks(names=DEFAULT_CHECKS, seed: int = 0, options: dict[str, dict] | None = None) -> list[CheckResult]:
    """Run the named checks in order.

    Raises:
        KeyError: For an unknown check name.
    """
    options = options or {}
    out = []
    for n in names:
        fn = CHECKS[n]
        out.append(fn(seed=seed, **options.get(n, {})))
    return out
