"""Single-excitation eigenmodes of the emitter-waveguide Hamiltonian.

Scattering states are labelled by a real frequency and carry emitter
amplitudes ``beta_n(omega)``; bound states are normalizable modes at
isolated frequencies with amplitudes ``v_n``. Downstream code consumes the
overlap table ``eps = conj(v)``, ``xi(omega) = conj(beta(omega))``.

Normalization: ``beta`` is delta-normalized in frequency, i.e. it is the
solution of ``M(omega) b = f(omega)`` divided by ``sqrt(2 pi)``. Waveguide
profiles use the annihilation-operator convention
``Psi_omega(x) = exp(-i omega x) C(x) / sqrt(2 pi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate as spi
from scipy import optimize

from .model import SystemSpec, coupling_vector, is_degenerate_feedback, validate
from .numerics import SingularMatrixError, solve_linear

__all__ = [
    "ScatteringState",
    "BoundState",
    "OverlapTable",
    "BoundSearch",
    "build_M",
    "solve_scattering_state",
    "scattering_beta",
    "find_bound_states",
    "bound_state_profile",
    "scattering_profile",
    "overlaps",
    "bound_inner_product",
    "bound_scattering_overlap",
    "scattering_overlap",
    "completeness",
    "CompletenessReport",
]

SQ2PI = math.sqrt(2 * math.pi)


@dataclass
class ScatteringState:
    """Continuum eigenmode at a real frequency.

    Attributes:
        omega: Frequency.
        beta: Delta-normalized emitter amplitudes, shape ``(N,)``.
        segment_coeffs: Plane-wave coefficient on each segment between the
            sorted points ``-t_N, ..., -t_1, t_1, ..., t_N`` (length ``2N+1``);
            the first entry is the incoming amplitude 1 and the last is ``tau``.
            ``None`` for custom couplings.
        tau: Transmission coefficient.
    """

    omega: float
    beta: np.ndarray
    segment_coeffs: np.ndarray | None
    tau: complex


@dataclass
class BoundState:
    """Normalizable eigenmode inside the continuum.

    Attributes:
        omega_b: Bound-state frequency.
        v: Emitter amplitudes, shape ``(N,)``.
        segment_coeffs: Coefficients ``B`` on the ``2N+1`` segments (outer ones zero).
        delays: Mirror delays, used to place the segments.
        norm_check: ``|total norm - 1|`` after normalization.
    """

    omega_b: float
    v: np.ndarray
    segment_coeffs: np.ndarray
    delays: np.ndarray
    norm_check: float = 0.0

    @property
    def breakpoints(self) -> np.ndarray:
        return np.concatenate([-self.delays[::-1], self.delays])


@dataclass
class BoundSearch:
    """Bound states plus diagnostics of rejected candidates."""

    states: list[BoundState]
    rejected: list[str] = field(default_factory=list)


@dataclass
class OverlapTable:
    """Overlaps of the emitter operators with the eigenmodes.

    Attributes:
        system: The system the table belongs to.
        eps: Bound-state overlaps, shape ``(N_b, N)``.
        omega_b: Bound-state frequencies, shape ``(N_b,)``.
        grid: Frequency samples.
        xi_grid: ``xi`` sampled on ``grid``, shape ``(len(grid), N)``.
    """

    system: SystemSpec
    eps: np.ndarray
    omega_b: np.ndarray
    grid: np.ndarray
    xi_grid: np.ndarray

    @property
    def n_bound(self) -> int:
        return self.eps.shape[0]

    def xi(self, omega: float | np.ndarray) -> np.ndarray:
        """Evaluate ``xi_n(omega)`` directly (no interpolation); shape ``omega.shape + (N,)``."""
        return np.conj(scattering_beta(self.system, omega))


def _feedback_parts(system: SystemSpec, w: np.ndarray):
    """Closed-form ``(M, f)`` for mirror couplings, vectorized over ``w``."""
    g = np.sqrt(system.gammas)
    t = system.delays
    tmin = np.minimum.outer(t, t)
    tmax = np.maximum.outer(t, t)
    ww = np.asarray(w, dtype=float)[..., None, None]
    M = 2 * np.outer(g, g) * np.sin(ww * tmin) * np.exp(-1j * ww * tmax)
    M = M + ww * np.eye(system.n) - np.diag(system.omegas)
    f = 2j * g * np.sin(ww[..., 0] * t)
    return M, f


def _feedback_derivs(system: SystemSpec, w: float):
    g = np.sqrt(system.gammas)
    t = system.delays
    tmin = np.minimum.outer(t, t)
    tmax = np.maximum.outer(t, t)
    dM = 2 * np.outer(g, g) * np.exp(-1j * w * tmax) * (tmin * np.cos(w * tmin) - 1j * tmax * np.sin(w * tmin))
    dM = dM + np.eye(system.n)
    df = 2j * g * t * np.cos(w * t)
    return dM, df


def _custom_self_energy(system: SystemSpec, w: float) -> np.ndarray:
    lo, hi = system.frequency_window
    N = system.n
    V = coupling_vector(system, np.array([w]))[:, 0]
    sig = 0.5j * np.outer(np.conj(V), V)
    if system.custom_principal is not None:
        return sig + np.asarray(system.custom_principal(w), dtype=complex) / (2 * np.pi)
    pv = np.zeros((N, N), dtype=complex)
    for m in range(N):
        for n in range(N):
            def prod(x, m=m, n=n):
                Vx = coupling_vector(system, np.array([x]))[:, 0]
                return np.conj(Vx[m]) * Vx[n]
            re = spi.quad(lambda x: prod(x).real, lo, hi, weight="cauchy", wvar=w, limit=400)[0]
            im = spi.quad(lambda x: prod(x).imag, lo, hi, weight="cauchy", wvar=w, limit=400)[0]
            # quad's cauchy weight is 1/(x - w); the self-energy needs 1/(w - x)
            pv[m, n] = -(re + 1j * im)
    return sig + pv / (2 * np.pi)


def build_M(system: SystemSpec, omega: float) -> tuple[np.ndarray, np.ndarray]:
    """Linear system ``M(omega) b = f(omega)`` for the scattering amplitudes.

    For the mirror-terminated waveguide, ``M`` has diagonal
    ``omega - omega_n + 2 gamma_n sin(omega t_n) exp(-i omega t_n)`` and
    off-diagonal ``2 sqrt(gamma_m gamma_n) sin(omega t_<) exp(-i omega t_>)``;
    ``f_n = 2i sqrt(gamma_n) sin(omega t_n)``. Custom couplings use
    ``M = omega - W - Sigma(omega)`` with the retarded self-energy
    ``Sigma_mn = (1/2pi) int conj(V_m) V_n / (omega - nu + i0) d nu`` and
    ``f = -conj(V(omega))``.

    Returns:
        ``(M, f)`` with shapes ``(N, N)`` and ``(N,)``.
    """
    if system.coupling_kind == "custom":
        V = coupling_vector(system, np.array([omega]))[:, 0]
        M = omega * np.eye(system.n) - np.diag(system.omegas) - _custom_self_energy(system, omega)
        return M, -np.conj(V)
    M, f = _feedback_parts(system, np.asarray(float(omega)))
    return M, f


def _singular_limit(system: SystemSpec, w: float, delta: float) -> np.ndarray:
    """Two-sided limit of the unscaled amplitude (before the 1/sqrt(2 pi) factor) at a singular node."""
    M, f = build_M(system, w)
    scale = 1.0 + system.gamma_max
    if system.coupling_kind == "feedback" and np.abs(M).max() < 1e-12 * scale and np.abs(f).max() < 1e-12 * scale:
        dM, df = _feedback_derivs(system, w)
        return np.linalg.solve(dM, df)
    lo = np.linalg.solve(*build_M(system, w - delta))
    hi = np.linalg.solve(*build_M(system, w + delta))
    return 0.5 * (lo + hi)


def scattering_beta(system: SystemSpec, omega: float | np.ndarray) -> np.ndarray:
    """Delta-normalized amplitudes ``beta_n(omega)``, shape ``omega.shape + (N,)``.

    Nodes where ``M`` is singular (bound-state frequencies) are filled with the
    two-sided limit.
    """
    w = np.asarray(omega, dtype=float)
    flat = w.reshape(-1)
    if system.coupling_kind == "custom":
        out = np.array([np.linalg.solve(*build_M(system, x)) for x in flat])
        return (out / SQ2PI).reshape(w.shape + (system.n,))
    M, f = _feedback_parts(system, flat)
    N = system.n
    if N == 1:
        den = M[:, 0, 0]
        bad = np.abs(den) < 1e-13 * (1 + system.gamma_max)
        out = np.empty((flat.size, 1), dtype=complex)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[:, 0] = f[:, 0] / den
    else:
        det = np.linalg.det(M)
        bad = np.abs(det) < 1e-13 * (1 + system.gamma_max) ** N
        Ms = np.where(bad[:, None, None], np.eye(N), M)
        out = np.linalg.solve(Ms, f[..., None])[..., 0]
    for k in np.flatnonzero(bad):
        out[k] = _singular_limit(system, float(flat[k]), 1e-6 * max(system.gamma_max, 1e-3))
    return (out / SQ2PI).reshape(w.shape + (N,))


def _plane_coeffs(system: SystemSpec, omega: float, amp: np.ndarray, incoming: complex) -> np.ndarray:
    """Segment coefficients of ``incoming + sum_m i sqrt(gamma_m) amp_m [..]`` across the kicks."""
    g = np.sqrt(system.gammas)
    t = system.delays
    N = system.n
    left = 1j * g * amp * np.exp(-1j * omega * t)
    right = 1j * g * amp * np.exp(1j * omega * t)
    coeffs = np.empty(2 * N + 1, dtype=complex)
    acc = complex(incoming)
    coeffs[0] = acc
    for k, m in enumerate(range(N - 1, -1, -1), start=1):  # crossing -t_N, ..., -t_1
        acc += left[m]
        coeffs[k] = acc
    for k, m in enumerate(range(N), start=N + 1):  # crossing t_1, ..., t_N
        acc -= right[m]
        coeffs[k] = acc
    return coeffs


def solve_scattering_state(system: SystemSpec, omega: float) -> ScatteringState:
    """Scattering eigenmode at ``omega``.

    Raises:
        SingularMatrixError: If ``omega`` coincides with a bound-state frequency.
    """
    M, f = build_M(system, omega)
    b, _ = solve_linear(M, f)
    beta = b / SQ2PI
    if system.coupling_kind == "custom":
        V = coupling_vector(system, np.array([omega]))[:, 0]
        tau = 1 - 1j * SQ2PI * np.sum(beta * V)
        return ScatteringState(float(omega), beta, None, complex(tau))
    coeffs = _plane_coeffs(system, omega, b, 1.0)
    return ScatteringState(float(omega), beta, coeffs, complex(coeffs[-1]))


def _segment_index(breaks: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.searchsorted(breaks, x, side="right")


def _segment_values(coeffs: np.ndarray, breaks: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Piecewise-constant coefficients with the mean of both sides at breakpoints."""
    x = np.asarray(x, dtype=float)
    lo = np.searchsorted(breaks, x, side="left")
    hi = np.searchsorted(breaks, x, side="right")
    return 0.5 * (coeffs[lo] + coeffs[hi])


def scattering_profile(state: ScatteringState, system: SystemSpec, x: float | np.ndarray) -> np.ndarray:
    """Waveguide amplitude ``Psi_omega(x)`` of a scattering state (feedback systems)."""
    if state.segment_coeffs is None:
        raise ValueError("position profile is only available for feedback systems")
    breaks = np.concatenate([-system.delays[::-1], system.delays])
    x = np.asarray(x, dtype=float)
    return np.exp(-1j * state.omega * x) * _segment_values(state.segment_coeffs, breaks, x) / SQ2PI


def bound_state_profile(state: BoundState, x: float | np.ndarray) -> np.ndarray:
    """Waveguide amplitude ``Phi(x)``; identically zero for ``|x| > t_N``."""
    x = np.asarray(x, dtype=float)
    return np.exp(-1j * state.omega_b * x) * _segment_values(state.segment_coeffs, state.breakpoints, x)


def _segment_overlap(ca: np.ndarray, cb: np.ndarray, breaks: np.ndarray) -> complex:
    """``sum_k ca_k conj(cb_k) |segment k|`` over the finite segments."""
    lengths = np.diff(breaks)
    return complex(np.sum(ca[1:-1] * np.conj(cb[1:-1]) * lengths))


def bound_inner_product(a: BoundState, b: BoundState) -> complex:
    """Full inner product: emitter part plus exact waveguide integral.

    Only meaningful for states at the same frequency (otherwise the phases do
    not cancel and the waveguide part is integrated exactly per segment).
    """
    breaks = a.breakpoints
    emit = complex(np.sum(a.v * np.conj(b.v)))
    dw = a.omega_b - b.omega_b
    if abs(dw) < 1e-14:
        return emit + _segment_overlap(a.segment_coeffs, b.segment_coeffs, breaks)
    return emit + _phase_segments(a.segment_coeffs[1:-1] * np.conj(b.segment_coeffs[1:-1]), breaks, dw)


def _phase_segments(prod: np.ndarray, breaks: np.ndarray, dw: float) -> complex:
    """``sum_k prod_k int_{b_k}^{b_{k+1}} exp(-i dw x) dx``."""
    lo, hi = breaks[:-1], breaks[1:]
    if abs(dw) < 1e-14:
        return complex(np.sum(prod * (hi - lo)))
    seg = (np.exp(-1j * dw * hi) - np.exp(-1j * dw * lo)) / (-1j * dw)
    return complex(np.sum(prod * seg))


def bound_scattering_overlap(state: BoundState, scat: ScatteringState) -> complex:
    """``sum_n v_n conj(beta_n) + int Phi conj(Psi) dx``; zero for orthogonal modes."""
    emit = complex(np.sum(state.v * np.conj(scat.beta)))
    prod = state.segment_coeffs[1:-1] * np.conj(scat.segment_coeffs[1:-1]) / SQ2PI
    return emit + _phase_segments(prod, state.breakpoints, state.omega_b - scat.omega)


def scattering_overlap(a: ScatteringState, b: ScatteringState, delays: np.ndarray) -> complex:
    """Non-singular part of ``<a|b>`` for two scattering modes at different frequencies.

    The outer half-lines are integrated with an Abel factor ``exp(-mu |x|)``,
    ``mu -> 0``; the result vanishes exactly for ``a.omega != b.omega``.
    """
    dw = a.omega - b.omega
    if abs(dw) < 1e-14:
        raise ValueError("frequencies must differ")
    breaks = np.concatenate([-delays[::-1], delays])
    L = breaks[-1]
    ca, cb = a.segment_coeffs, b.segment_coeffs
    mid = _phase_segments(ca[1:-1] * np.conj(cb[1:-1]), breaks, dw)
    left = ca[0] * np.conj(cb[0]) * 1j * np.exp(1j * dw * L) / dw
    right = -ca[-1] * np.conj(cb[-1]) * 1j * np.exp(-1j * dw * L) / dw
    emit = complex(np.sum(a.beta * np.conj(b.beta)))
    return emit + (mid + left + right) / (2 * np.pi)


def _bound_from_v(system: SystemSpec, w: float, v: np.ndarray) -> BoundState:
    coeffs = _plane_coeffs(system, w, v, 0.0)
    return BoundState(float(w), np.asarray(v, dtype=complex), coeffs, system.delays.copy())


def _normalize(state: BoundState) -> BoundState:
    nrm = math.sqrt(bound_inner_product(state, state).real)
    state.v = state.v / nrm
    state.segment_coeffs = state.segment_coeffs / nrm
    state.norm_check = abs(bound_inner_product(state, state).real - 1.0)
    return state


def _custom_bound_norm(system: SystemSpec, w: float, v: np.ndarray) -> float:
    lo, hi = system.frequency_window

    def dens(x):
        V = coupling_vector(system, np.array([x]))[:, 0]
        return abs(np.sum(v * V)) ** 2 / (2 * np.pi * (x - w) ** 2) if x != w else 0.0

    photon = spi.quad(dens, lo, hi, points=[w], limit=400)[0]
    return float(np.sum(np.abs(v) ** 2) + photon)


def find_bound_states(
    system: SystemSpec,
    n_grid: int = 4001,
    det_tol: float = 1e-8,
    consistency_tol: float = 1e-8,
    return_search: bool = False,
) -> list[BoundState] | BoundSearch:
    """Locate and normalize the bound states.

    Degenerate mirror systems (all emitters at one frequency commensurate with
    every delay) get ``N`` states built from the unit vectors and
    Gram-Schmidt-orthonormalized under the full inner product. Otherwise local
    minima of ``|det M|`` on the window are refined and accepted only if both
    ``|det M|`` and the normalizability residual ``|sum_n v_n V_n|`` are small.

    Args:
        system: Valid system.
        n_grid: Scan resolution.
        det_tol: Acceptance threshold on ``|det M|`` (relative to ``gamma^N``).
        consistency_tol: Threshold on ``|sum_n v_n V_n| / sqrt(gamma)``.
        return_search: Also return the diagnostics of rejected candidates.

    Returns:
        States, or a :class:`BoundSearch` when ``return_search`` is set.
    """
    problems = validate(system)
    if problems:
        raise ValueError("; ".join(problems))
    rejected: list[str] = []
    states: list[BoundState] = []
    if is_degenerate_feedback(system):
        w0 = float(system.omegas[0])
        basis = [_bound_from_v(system, w0, np.eye(system.n)[a]) for a in range(system.n)]
        for a, s in enumerate(basis):
            for prev in states:
                c = bound_inner_product(s, prev)
                s.v = s.v - c * prev.v
                s.segment_coeffs = s.segment_coeffs - c * prev.segment_coeffs
            states.append(_normalize(s))
    else:
        lo, hi = system.frequency_window
        ws = np.linspace(lo, hi, n_grid)
        if system.coupling_kind == "custom":
            # the principal-value integral is singular at the window edges
            ws = np.linspace(lo, hi, n_grid + 2)[1:-1]
        scale = max(system.gamma_max, 1e-12) ** system.n
        absdet = np.array([abs(np.linalg.det(build_M(system, w)[0])) for w in ws])
        cand = [k for k in range(1, n_grid - 1) if absdet[k] <= absdet[k - 1] and absdet[k] <= absdet[k + 1]]
        sq_g = math.sqrt(max(system.gamma_max, 1e-12))
        for k in cand:
            res = optimize.minimize_scalar(
                lambda w: abs(np.linalg.det(build_M(system, w)[0])),
                bounds=(ws[k - 1], ws[k + 1]), method="bounded",
                options={"xatol": 1e-13 * max(1.0, abs(ws[k]))},
            )
            w = float(res.x)
            M, _ = build_M(system, w)
            d = abs(np.linalg.det(M))
            _, _, vh = np.linalg.svd(M)
            v = np.conj(vh[-1])
            V = coupling_vector(system, np.array([w]))[:, 0]
            resid = abs(np.sum(v * V)) / sq_g
            if d > det_tol * scale or resid > consistency_tol:
                if d < 1e-2 * scale:
                    rejected.append(f"candidate at omega={w:.12g} rejected: |det M|={d:.3e}, normalizability residual={resid:.3e}")
                continue
            if system.coupling_kind == "custom":
                nrm = math.sqrt(_custom_bound_norm(system, w, v))
                coeffs = np.zeros(2 * system.n + 1, dtype=complex)
                states.append(BoundState(w, v / nrm, coeffs, system.delays.copy(), 0.0))
            else:
                states.append(_normalize(_bound_from_v(system, w, v)))
    if return_search:
        return BoundSearch(states, rejected)
    return states


def overlaps(system: SystemSpec, states: list[BoundState], grid: np.ndarray | None = None, n_grid: int = 4001) -> OverlapTable:
    """Overlap table ``eps = conj(v)`` and ``xi = conj(beta)`` sampled on ``grid``."""
    if grid is None:
        lo, hi = system.frequency_window
        grid = np.linspace(lo, hi, n_grid)
    grid = np.asarray(grid, dtype=float)
    if states:
        eps = np.array([np.conj(s.v) for s in states])
        wb = np.array([s.omega_b for s in states])
    else:
        eps = np.zeros((0, system.n), dtype=complex)
        wb = np.zeros(0)
    xi = np.conj(scattering_beta(system, grid))
    return OverlapTable(system, eps, wb, grid, xi)


@dataclass
class CompletenessReport:
    """Per-emitter ``sum_a |eps|^2 + int |xi|^2`` with an analytic tail estimate.

    Attributes:
        bound: Bound-state part per emitter.
        continuum: Windowed continuum integral per emitter.
        tail: Leading-order estimate of the continuum weight outside the window.
    """

    bound: np.ndarray
    continuum: np.ndarray
    tail: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.bound + self.continuum + self.tail

    @property
    def windowed(self) -> np.ndarray:
        return self.bound + self.continuum


def completeness(table: OverlapTable, n_grid: int = 40001, tail_span: float = 1000.0) -> CompletenessReport:
    """Evaluate the completeness sum of every emitter.

    The continuum weight outside the window is estimated by integrating
    ``|xi_n|^2`` numerically over ``tail_span * gamma_max`` on each side and
    adding the asymptotic remainder: far from resonance
    ``|xi_n|^2 ~ |V_n|^2 / (2 pi (omega - omega_n)^2)`` and for mirror couplings
    ``|V_n|^2`` averages to ``2 gamma_n``, so each far half-line contributes
    ``gamma_n / (pi * distance)``.
    """
    system = table.system
    lo, hi = system.frequency_window
    w = np.linspace(lo, hi, n_grid)
    cont = spi.simpson(np.abs(table.xi(w)) ** 2, x=w, axis=0)
    bound = np.sum(np.abs(table.eps) ** 2, axis=0) if table.n_bound else np.zeros(system.n)
    g = system.gammas
    wn = system.omegas
    span = tail_span * max(system.gamma_max, 1e-12)
    step = min((hi - lo) / (n_grid - 1), np.pi / (20 * system.delays.max()))
    m = int(np.ceil(span / step)) | 1
    tail = np.zeros(system.n)
    for a, b in ((hi, hi + span), (lo - span, lo)):
        ws = np.linspace(a, b, m)
        tail += spi.simpson(np.abs(table.xi(ws)) ** 2, x=ws, axis=0)
    tail += g / np.pi * (1.0 / (hi + span - wn) + 1.0 / (wn - lo + span))
    return CompletenessReport(np.asarray(bound, dtype=float), np.asarray(cont, dtype=float), tail)
