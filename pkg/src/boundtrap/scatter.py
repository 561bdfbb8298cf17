"""Two-photon scattering into bound states.

The pipeline is

1. Green functions ``G_mn(t)`` of the emitter operators, split into a
   bound part (undamped oscillations) and a decaying continuum part,
2. the T-matrix ``T(Omega + i0)``, a half-line Fourier transform of ``G**2``,
3. the trapping amplitude
   ``Gamma_a(w; nu1, nu2) = -4 pi sum_k a_k(w + w_a) xi_k(nu1) xi_k(nu2)`` with
   ``a_k(Omega) = sum_m conj(eps_m^a) conj(xi_m(Omega - w_a)) [T^-1(Omega)]_mk``,
4. trapping probabilities, their Cauchy-Schwarz bound and wavepacket design.

All time-domain quantities are stored in a frame rotating at ``omega_ref``;
two-photon energies enter as detunings ``D = Omega - 2 omega_ref``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .model import SystemSpec
from .numerics import (
    SingularMatrixError,
    filon_integral,
    maximize_1d,
    solve_delay_system,
    spectrum_to_time,
    trapezoid_weights,
)
from .spectral import OverlapTable, find_bound_states, overlaps, scattering_beta

__all__ = [
    "GreenFunction",
    "TMatrix",
    "PoleProximityError",
    "IllConditionedError",
    "green_function",
    "t_matrix",
    "t_matrix_eta_oracle",
    "gaussian_envelope",
    "StructuredPacket",
    "GridPacket",
    "GaussianMixturePacket",
    "DesignMatrices",
    "DesignResult",
    "TrapSolver",
    "gamma_amplitude",
    "trapping_probability",
    "upper_bound",
    "optimal_wavepacket",
    "design_matrices",
    "design_input",
    "random_mixture_packet",
    "fidelity",
    "t_matrices",
]

SQ2PI = math.sqrt(2 * math.pi)


class PoleProximityError(ValueError):
    """Total energy too close to a sum of two bound-state frequencies."""


class IllConditionedError(ValueError):
    """Design matrix too ill-conditioned to invert reliably."""


# ---------------------------------------------------------------- Green function


@dataclass
class GreenFunction:
    """Emitter Green function ``G(t) = G_b(t) + G_c(t)`` for ``t >= 0``.

    Attributes:
        eps: Bound-state overlaps, shape ``(N_b, N)``.
        omega_b: Bound-state frequencies.
        omega_ref: Frame frequency; ``gc`` holds ``G_c(t) exp(i omega_ref t)``.
        h: Time step.
        gc: Rotating-frame continuum part, shape ``(n_t, N, N)``.
        tail: ``max |G_c|`` over the last tenth of the time grid.
    """

    eps: np.ndarray
    omega_b: np.ndarray
    omega_ref: float
    h: float
    gc: np.ndarray
    tail: float = 0.0

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.gc.shape[0]) * self.h

    @property
    def t_max(self) -> float:
        return (self.gc.shape[0] - 1) * self.h

    @property
    def projectors(self) -> np.ndarray:
        """``P^a_mn = eps_m^a conj(eps_n^a)``, shape ``(N_b, N, N)``."""
        return self.eps[:, :, None] * np.conj(self.eps[:, None, :])

    def bound_rotating(self, t: np.ndarray) -> np.ndarray:
        ph = np.exp(-1j * np.outer(np.asarray(t, dtype=float), self.omega_b - self.omega_ref))
        return np.einsum("ta,amn->tmn", ph, self.projectors)

    def continuum(self, t: np.ndarray) -> np.ndarray:
        """``G_c(t)`` in the lab frame by linear interpolation (zero beyond ``t_max``)."""
        t = np.asarray(t, dtype=float)
        s = t / self.h
        k = np.clip(np.floor(s).astype(int), 0, self.gc.shape[0] - 2)
        u = (s - k)[..., None, None]
        val = (1 - u) * self.gc[k] + u * self.gc[k + 1]
        val = np.where((t > self.t_max)[..., None, None], 0.0, val)
        return val * np.exp(-1j * self.omega_ref * t)[..., None, None]

    def full(self, t: np.ndarray) -> np.ndarray:
        """``G(t)`` in the lab frame."""
        t = np.asarray(t, dtype=float)
        gb = self.bound_rotating(t) * np.exp(-1j * self.omega_ref * t)[:, None, None]
        return gb + self.continuum(t)


def _commensurate_step(delays: np.ndarray, target: float) -> float | None:
    """Largest ``h <= target`` dividing every delay, or ``None``."""
    d0 = float(delays.min())
    k = max(1, int(math.ceil(d0 / target - 1e-9)))
    for kk in range(k, k + 4096):
        h = d0 / kk
        if all(abs(d / h - round(d / h)) < 1e-9 * (d / h) for d in delays):
            return h
    return None


def _delay_terms(system: SystemSpec, omega_ref: float):
    """Instantaneous rates and delayed couplings of the emitter Green function."""
    g = np.sqrt(system.gammas)
    t = system.delays
    N = system.n
    rates = -1j * (system.omegas - omega_ref) - system.gammas
    terms: dict[float, np.ndarray] = {}

    def add(d: float, m: int, k: int, val: float) -> None:
        key = round(d, 12)
        if key not in terms:
            terms[key] = np.zeros((N, N), dtype=complex)
        terms[key][m, k] += val * np.exp(1j * omega_ref * d)

    for m in range(N):
        for k in range(N):
            gg = g[m] * g[k]
            if m != k:
                add(abs(t[m] - t[k]), m, k, -gg)
            add(t[m] + t[k], m, k, gg)
    return rates, sorted(terms.items())


def green_function(
    table: OverlapTable,
    t_max: float | None = None,
    h: float | None = None,
    tail_tol: float = 1e-8,
    t_cap: float | None = None,
    method: str = "auto",
) -> GreenFunction:
    """Compute the emitter Green function.

    The default route integrates the exact delay equation

        G_m' = -i w_m G_m - sum_k sqrt(g_m g_k) [G_k(t - |t_m - t_k|) - G_k(t - t_m - t_k)],

    ``G(0) = 1``, zero history, then subtracts the bound part. The time grid
    is extended beyond ``t_max`` until the continuum part has decayed below
    ``tail_tol`` (at most ``t_cap``). When the delays share no common step the
    continuum part is obtained instead by Fourier transforming
    ``xi_m conj(xi_n)`` over the frequency window.

    Args:
        table: Overlap table.
        t_max: Minimum time horizon, default ``40 / gamma_max``.
        h: Target step, default ``min(0.005, t_1 / 20) / gamma_max``.
        tail_tol: Decay target of ``|G_c|`` at the end of the grid.
        t_cap: Hard cap on the horizon, default ``2000 / gamma_max``.
        method: ``"delay"``, ``"spectral"`` or ``"auto"``.

    Returns:
        GreenFunction; a warning is emitted if the final tail exceeds 1e-3.
    """
    system = table.system
    gmax = max(system.gamma_max, 1e-12)
    t_max = 40.0 / gmax if t_max is None else float(t_max)
    t_cap = max(t_max, 2000.0 / gmax) if t_cap is None else float(t_cap)
    target = min(0.005 / gmax, float(system.delays.min()) / 20) if h is None else float(h)
    wref = system.omega_ref
    N = system.n
    step = _commensurate_step(system.delays, target) if system.coupling_kind == "feedback" else None
    if method == "delay" and step is None:
        raise ValueError("delays are not commensurate with a usable time step")
    use_delay = method == "delay" or (method == "auto" and step is not None)
    proj = np.einsum("am,an->amn", table.eps, np.conj(table.eps)) if table.n_bound else np.zeros((0, N, N))

    def bound(t: np.ndarray) -> np.ndarray:
        if not table.n_bound:
            return np.zeros((t.size, N, N), dtype=complex)
        ph = np.exp(-1j * np.outer(t, table.omega_b - wref))
        return np.einsum("ta,amn->tmn", ph, proj)

    if use_delay:
        rates, terms = _delay_terms(system, wref)
        delayed = [(d, C) for d, C in terms if d > 0]
        horizon = t_max
        while True:
            t, y = solve_delay_system(rates, delayed, np.eye(N), horizon, step)
            gc = y - bound(t)
            n10 = max(2, len(t) // 10)
            tail = float(np.abs(gc[-n10:]).max())
            if tail <= tail_tol or horizon >= t_cap:
                break
            horizon = min(2 * horizon, t_cap)
        return _finish(GreenFunction(table.eps, table.omega_b, wref, step, gc, tail))

    lo, hi = system.frequency_window
    d_w = 0.005 * gmax
    w = np.linspace(lo, hi, int(math.ceil((hi - lo) / d_w)) + 1)
    xi = np.conj(scattering_beta(system, w))
    dens = xi[:, :, None] * np.conj(xi[:, None, :])
    ts, g = spectrum_to_time(dens, lo - wref, w[1] - w[0], pad=4)
    keep = (ts >= 0) & (ts <= t_max + 1e-12)
    order = np.argsort(ts[keep])
    tt = ts[keep][order]
    gc = g[keep][order]
    tail = float(np.abs(gc[-max(2, len(tt) // 10):]).max())
    return _finish(GreenFunction(table.eps, table.omega_b, wref, float(tt[1] - tt[0]), gc, tail))


def _finish(gf: GreenFunction) -> GreenFunction:
    if gf.tail > 1e-3:
        warnings.warn(f"continuum Green function not decayed: tail {gf.tail:.2e}", RuntimeWarning, stacklevel=3)
    return gf


# ---------------------------------------------------------------- T-matrix


@dataclass
class TMatrix:
    """T-matrix at one total energy.

    Attributes:
        Omega: Total two-excitation energy.
        values: ``T(Omega + i0)``, shape ``(N, N)``.
    """

    Omega: float
    values: np.ndarray


def _pole_offsets(green: GreenFunction, Omega: np.ndarray) -> np.ndarray:
    if green.omega_b.size == 0:
        return np.full(np.shape(Omega), np.inf)
    sums = np.add.outer(green.omega_b, green.omega_b).ravel()
    return np.min(np.abs(np.asarray(Omega)[..., None] - sums), axis=-1)


def _t_numeric(green: GreenFunction, D: np.ndarray) -> np.ndarray:
    """``int_0^T (2 G_b G_c + G_c^2) exp(i D t) dt``, Filon with Richardson."""
    gb = green.bound_rotating(green.t)
    q = 2 * gb * green.gc + green.gc**2
    n = q.shape[0]
    if n % 2 == 0:
        q = q[:-1]
    fine = filon_integral(q, green.h, D)
    coarse = filon_integral(q[::2], 2 * green.h, D)
    return (4 * fine - coarse) / 3


def _t_bound(green: GreenFunction, Omega: np.ndarray) -> np.ndarray:
    N = green.eps.shape[1]
    out = np.zeros(np.shape(Omega) + (N, N), dtype=complex)
    P = green.projectors
    for a in range(P.shape[0]):
        for b in range(P.shape[0]):
            den = np.asarray(Omega) - green.omega_b[a] - green.omega_b[b]
            out += 1j * (P[a] * P[b]) / den[..., None, None]
    return out


def t_matrices(green: GreenFunction, Omegas: np.ndarray) -> np.ndarray:
    """T-matrices on many energies, shape ``(K, N, N)``; poles give ``inf`` entries."""
    Om = np.atleast_1d(np.asarray(Omegas, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        tb = _t_bound(green, Om)
    return tb + _t_numeric(green, Om - 2 * green.omega_ref)


def t_matrix(green: GreenFunction, Omega: float, pole_guard: float | None = None) -> TMatrix:
    """T-matrix ``T(Omega + i0)``.

    The bound-bound term is the exact ``i0`` limit
    ``i sum_ab P^a P^b / (Omega - w_a - w_b)``; the cross and continuum terms
    are integrated numerically on the Green-function grid.

    Raises:
        PoleProximityError: Within ``pole_guard`` (default ``1e-6 gamma``) of a pole.
    """
    guard = 1e-6 if pole_guard is None else pole_guard
    if _pole_offsets(green, Omega) < guard:
        raise PoleProximityError(f"Omega={Omega} is within {guard:g} of a bound-bound pole")
    return TMatrix(float(Omega), t_matrices(green, np.array([Omega]))[0])


def _neville_at_zero(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Polynomial extrapolation of ``y(x)`` to ``x = 0`` (Neville's scheme)."""
    p = [np.array(v, dtype=complex) for v in y]
    n = len(x)
    for k in range(1, n):
        for i in range(n - k):
            p[i] = (x[i + k] * p[i] - x[i] * p[i + 1]) / (x[i + k] - x[i])
    return p[0]


def t_matrix_eta_oracle(
    green: GreenFunction,
    Omegas: np.ndarray,
    etas: np.ndarray | None = None,
    decay_factor: float = 18.4,
) -> np.ndarray:
    """Independent T-matrix estimate by damping and extrapolation.

    Integrates the full ``G(t)**2 exp((i Omega - eta) t)`` by brute force out
    to ``t = decay_factor / eta`` (no bound/continuum split), for a sequence of
    ``eta``, then extrapolates polynomially to ``eta = 0``.
    """
    etas = 0.05 / 2.0 ** np.arange(6) if etas is None else np.asarray(etas, dtype=float)
    D = np.atleast_1d(np.asarray(Omegas, dtype=float)) - 2 * green.omega_ref
    vals = []
    for eta in etas:
        n = max(int(math.ceil(decay_factor / eta / green.h)) + 1, green.gc.shape[0])
        n += n % 2 == 0
        t = np.arange(n) * green.h
        g = green.bound_rotating(t)
        g[: green.gc.shape[0]] += green.gc
        q = g**2
        fine = filon_integral(q, green.h, D + 1j * eta, chunk=4)
        coarse = filon_integral(q[::2], 2 * green.h, D + 1j * eta, chunk=4)
        vals.append((4 * fine - coarse) / 3)
    return _neville_at_zero(etas, np.array(vals))


# ---------------------------------------------------------------- wavepackets


def gaussian_envelope(Omega: np.ndarray, Omega0: float, Delta: float) -> np.ndarray:
    """Square-normalized Gaussian ``(pi Delta^2)^(-1/4) exp(-(Omega - Omega0)^2 / (2 Delta^2))``."""
    return (math.pi * Delta**2) ** -0.25 * np.exp(-((np.asarray(Omega) - Omega0) ** 2) / (2 * Delta**2))


@dataclass
class StructuredPacket:
    """``psi(nu1, nu2) = norm * f(nu1 + nu2) * sum_n d_n conj(xi_n(nu1) xi_n(nu2))``.

    Attributes:
        d: Kernel coefficients, shape ``(N,)``.
        Omega0: Central two-photon energy.
        Delta: Energy spread of the Gaussian envelope.
        norm: Normalization constant.
        label: Free-form description.
    """

    d: np.ndarray
    Omega0: float
    Delta: float
    norm: float
    label: str = ""

    def amplitude(self, table: OverlapTable, nu1: np.ndarray, nu2: np.ndarray) -> np.ndarray:
        x1 = np.conj(table.xi(nu1))
        x2 = np.conj(table.xi(nu2))
        kern = np.sum(self.d * x1 * x2, axis=-1)
        return self.norm * gaussian_envelope(np.asarray(nu1) + np.asarray(nu2), self.Omega0, self.Delta) * kern


@dataclass
class GridPacket:
    """Two-photon amplitude sampled on a uniform square frequency grid.

    Attributes:
        nu: Grid nodes (uniform), shape ``(n,)``.
        psi: Symmetric amplitude, shape ``(n, n)``.
    """

    nu: np.ndarray
    psi: np.ndarray

    def __post_init__(self) -> None:
        self.psi = 0.5 * (self.psi + self.psi.T)

    @property
    def d_nu(self) -> float:
        return float(self.nu[1] - self.nu[0])

    def norm2(self) -> float:
        w = trapezoid_weights(self.nu.size, self.d_nu)
        return float(np.einsum("i,j,ij->", w, w, np.abs(self.psi) ** 2))

    def normalized(self) -> "GridPacket":
        n2 = self.norm2()
        return GridPacket(self.nu, self.psi / math.sqrt(n2) if n2 > 0 else self.psi)


@dataclass
class GaussianMixturePacket:
    """Symmetrized sum of Gaussian photon pairs.

    Each term ``j`` contributes
    ``c_j [g_j1(nu1) g_j2(nu2) + g_j2(nu1) g_j1(nu2)]`` with
    ``g(nu) = exp(-(nu - mu)^2 / (2 sigma^2) - i nu x0)``, a photon centred at
    frequency ``mu`` and position ``x0``.

    Attributes:
        coeffs: Term weights ``c_j``.
        mu: Centre frequencies, shape ``(J, 2)``.
        sigma: Spectral widths, shape ``(J, 2)``.
        x0: Positions, shape ``(J, 2)``.
    """

    coeffs: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    x0: np.ndarray
    scale: float = 1.0

    @staticmethod
    def _overlap(m1, s1, x1, m2, s2, x2):
        """``int g1 conj(g2) d nu`` for two Gaussians of the family above."""
        a = 1 / (2 * s1**2) + 1 / (2 * s2**2)
        b = m1 / s1**2 + m2 / s2**2 - 1j * (x1 - x2)
        c = m1**2 / (2 * s1**2) + m2**2 / (2 * s2**2)
        return np.sqrt(np.pi / a) * np.exp(b**2 / (4 * a) - c)

    def norm2(self) -> float:
        J = len(self.coeffs)
        tot = 0j
        ov = self._overlap
        for i in range(J):
            for j in range(J):
                p = [(self.mu[i, k], self.sigma[i, k], self.x0[i, k]) for k in range(2)]
                q = [(self.mu[j, k], self.sigma[j, k], self.x0[j, k]) for k in range(2)]
                direct = ov(*p[0], *q[0]) * ov(*p[1], *q[1])
                swap = ov(*p[0], *q[1]) * ov(*p[1], *q[0])
                tot += self.coeffs[i] * np.conj(self.coeffs[j]) * 2 * (direct + swap)
        return float(tot.real) * self.scale**2

    def normalized(self) -> "GaussianMixturePacket":
        return GaussianMixturePacket(self.coeffs, self.mu, self.sigma, self.x0, 1.0 / math.sqrt(self.norm2()))

    def _g(self, nu, j, k):
        return np.exp(-((nu - self.mu[j, k]) ** 2) / (2 * self.sigma[j, k] ** 2) - 1j * nu * self.x0[j, k])

    def amplitude(self, nu1: np.ndarray, nu2: np.ndarray) -> np.ndarray:
        out = 0j
        for j, c in enumerate(self.coeffs):
            out = out + c * (self._g(nu1, j, 0) * self._g(nu2, j, 1) + self._g(nu1, j, 1) * self._g(nu2, j, 0))
        return self.scale * out

    def position_factor(self, x: np.ndarray, j: int, k: int) -> np.ndarray:
        """``(1/2pi) int g(nu) exp(i nu x) d nu`` in closed form."""
        s, m, x0 = self.sigma[j, k], self.mu[j, k], self.x0[j, k]
        return s / SQ2PI * np.exp(1j * m * (x - x0) - 0.5 * s**2 * (x - x0) ** 2)

    def to_grid(self, nu: np.ndarray) -> GridPacket:
        return GridPacket(nu, self.amplitude(nu[:, None], nu[None, :]))


def random_mixture_packet(
    rng: np.random.Generator,
    center: float,
    n_terms: int = 3,
    detuning: float = 2.0,
    sigma_range: tuple[float, float] = (0.3, 1.0),
    x0: float = 0.0,
    spread: float = 0.0,
) -> GaussianMixturePacket:
    """Random normalized Gaussian-mixture packet around ``center``.

    Args:
        rng: Random generator.
        center: Single-photon centre frequency.
        n_terms: Number of symmetrized Gaussian pairs.
        detuning: Centre frequencies are drawn from ``center +/- detuning``.
        sigma_range: Range of spectral widths.
        x0: Mean photon position.
        spread: Positions are drawn from ``x0 +/- spread``.
    """
    mu = center + rng.uniform(-detuning, detuning, size=(n_terms, 2))
    sig = rng.uniform(*sigma_range, size=(n_terms, 2))
    pos = x0 + rng.uniform(-spread, spread, size=(n_terms, 2))
    c = rng.normal(size=n_terms) + 1j * rng.normal(size=n_terms)
    return GaussianMixturePacket(c, mu, sig, pos).normalized()


# ---------------------------------------------------------------- design


@dataclass
class DesignMatrices:
    """Superposition-design matrices at one total energy.

    Attributes:
        Omega: Total energy.
        S: Map from input kernel coefficients to bound-state amplitudes, ``(N_b, N)``.
        X: Gram matrix of the two-photon kernels, ``(N, N)``.
    """

    Omega: float
    S: np.ndarray
    X: np.ndarray


@dataclass
class DesignResult:
    """Designed input and its predicted effect.

    Attributes:
        c_in: Kernel coefficients, normalized so that ``c_in^H X c_in = 1``.
        c_out: Predicted bound-state amplitudes ``S c_in``.
        fidelity: Overlap of ``c_out`` with the target direction.
        condition_number: 2-norm condition number of ``S``.
        Omega0: Central energy.
        Delta: Envelope width.
        packet: The corresponding normalized structured packet.
    """

    c_in: np.ndarray
    c_out: np.ndarray
    fidelity: float
    condition_number: float
    Omega0: float
    Delta: float
    packet: StructuredPacket


@dataclass
class TrapSolver:
    """Cached scattering-theory evaluator for one system.

    Holds the overlap table, the Green function and a uniform frequency grid
    centred on ``omega_ref`` whose step divides the default energy-scan step,
    so kernel Gram matrices on the aligned energy grid come from one FFT
    convolution.

    Attributes:
        table: Overlap table.
        green: Green function.
        d_nu: Frequency-grid step.
        nu: Frequency grid.
    """

    table: OverlapTable
    green: GreenFunction
    d_nu: float
    nu: np.ndarray = field(init=False)
    _xi_nu: np.ndarray = field(init=False, repr=False)
    _xgrid: tuple[np.ndarray, np.ndarray] | None = field(init=False, default=None, repr=False)

    def __post_init__(self) -> None:
        s = self.table.system
        lo, hi = s.frequency_window
        wr = s.omega_ref
        k_lo = int(math.floor((lo - wr) / self.d_nu))
        k_hi = int(math.ceil((hi - wr) / self.d_nu))
        self.nu = wr + self.d_nu * np.arange(k_lo, k_hi + 1)
        self._xi_nu = self.table.xi(self.nu)

    @classmethod
    def build(
        cls,
        system: SystemSpec,
        d_nu: float | None = None,
        t_max: float | None = None,
        h: float | None = None,
    ) -> "TrapSolver":
        """Bound states, overlaps and Green function for ``system``."""
        states = find_bound_states(system)
        table = overlaps(system, states, n_grid=2001)
        green = green_function(table, t_max=t_max, h=h)
        gmax = max(system.gamma_max, 1e-12)
        return cls(table, green, 0.005 * gmax if d_nu is None else d_nu)

    @property
    def system(self) -> SystemSpec:
        return self.table.system

    @property
    def n_bound(self) -> int:
        return self.table.n_bound

    # energy-resolved building blocks

    def t_inverse(self, Omegas: np.ndarray, pole_guard: float = 1e-9) -> np.ndarray:
        """``T^-1`` on many energies; exactly zero on bound-bound poles (its limit)."""
        Om = np.atleast_1d(np.asarray(Omegas, dtype=float))
        near = _pole_offsets(self.green, Om) < pole_guard
        with np.errstate(invalid="ignore"):
            T = t_matrices(self.green, Om)
        T[near] = np.eye(T.shape[-1])
        Ti = np.linalg.inv(T)
        Ti[near] = 0.0
        return Ti

    def trap_vector(self, alpha: int, Omegas: np.ndarray) -> np.ndarray:
        """``a_k(Omega)``, shape ``(K, N)``."""
        Om = np.atleast_1d(np.asarray(Omegas, dtype=float))
        Ti = self.t_inverse(Om)
        xo = np.conj(self.table.xi(Om - self.table.omega_b[alpha]))
        left = np.conj(self.table.eps[alpha])[None, :] * xo
        return np.einsum("km,kmn->kn", left, Ti)

    def x_direct(self, Omegas: np.ndarray) -> np.ndarray:
        """Kernel Gram matrices by direct quadrature, shape ``(K, N, N)``."""
        Om = np.atleast_1d(np.asarray(Omegas, dtype=float))
        out = np.empty((Om.size, self.system.n, self.system.n), dtype=complex)
        w = trapezoid_weights(self.nu.size, self.d_nu)
        for k, O in enumerate(Om):
            p = self._xi_nu * self.table.xi(O - self.nu)
            out[k] = np.einsum("i,im,in->mn", w, p, np.conj(p))
        return out

    def _x_on_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Gram matrices on the aligned energy grid ``2 nu_0 + k d_nu``."""
        if self._xgrid is None:
            N = self.system.n
            n = self.nu.size
            Om = 2 * self.nu[0] + self.d_nu * np.arange(2 * n - 1)
            X = np.empty((Om.size, N, N), dtype=complex)
            for m in range(N):
                for l in range(N):
                    p = self._xi_nu[:, m] * np.conj(self._xi_nu[:, l])
                    X[:, m, l] = signal.fftconvolve(p, p) * self.d_nu
            # trapezoid end corrections are below the kernel tails and omitted
            self._xgrid = (Om, X)
        return self._xgrid

    def x_matrices(self, Omegas: np.ndarray) -> np.ndarray:
        """Gram matrices, from the aligned grid when every energy lies on it."""
        Om = np.atleast_1d(np.asarray(Omegas, dtype=float))
        grid, X = self._x_on_grid()
        idx = np.rint((Om - grid[0]) / self.d_nu).astype(int)
        if np.all(np.abs(grid[np.clip(idx, 0, grid.size - 1)] - Om) < 1e-9 * self.d_nu) and np.all(
            (idx >= 0) & (idx < grid.size)
        ):
            return X[idx]
        return self.x_direct(Om)

    # trapping functionals

    def bound_density(self, alpha: int, Omegas: np.ndarray) -> np.ndarray:
        """``1/2 int |Gamma_a(Omega - w_a; nu, Omega - nu)|^2 d nu``."""
        a = self.trap_vector(alpha, Omegas)
        X = self.x_matrices(Omegas)
        return 8 * math.pi**2 * np.real(np.einsum("km,kmn,kn->k", a, X, np.conj(a)))

    def scan_grid(self, alpha: int = 0, half_width: float | None = None, n_scan: int = 1601) -> np.ndarray:
        """Energies ``2 w_a +/- half_width`` (default ``16 gamma``; short delays peak far out)."""
        s = self.system
        hw = 16 * max(s.gamma_max, 1e-12) if half_width is None else half_width
        centre = 2 * float(self.table.omega_b[alpha]) if self.n_bound else 2 * s.omega_ref
        return np.linspace(centre - hw, centre + hw, n_scan)

    def upper_bound(self, alpha: int = 0, tol: float = 1e-6, n_scan: int = 1601) -> tuple[float, float]:
        """Largest single-energy trapping probability and its energy ``Omega*``.

        Scan then golden-section refinement. Ties between mirror-image
        maxima are broken towards positive detuning.
        """
        if self.n_bound == 0:
            return 0.0, float("nan")
        Om = self.scan_grid(alpha, n_scan=n_scan)
        vals = self.bound_density(alpha, Om)
        return_x, best = maximize_1d(
            lambda O: float(self.bound_density(alpha, np.array([O]))[0]),
            (Om[0], Om[-1]), tol=tol, n_scan=n_scan, values=vals, prefer="right",
        )
        return float(best), float(return_x)

    def envelope_grid(self, Omega0: float, Delta: float, width: float = 8.0) -> np.ndarray:
        """Aligned energy nodes covering ``Omega0 +/- width * Delta``."""
        grid0 = 2 * self.nu[0]
        k0 = int(math.floor((Omega0 - width * Delta - grid0) / self.d_nu))
        k1 = int(math.ceil((Omega0 + width * Delta - grid0) / self.d_nu))
        return grid0 + self.d_nu * np.arange(k0, k1 + 1)

    def structured_packet(self, d: np.ndarray, Omega0: float, Delta: float, label: str = "") -> StructuredPacket:
        """Normalized packet ``f(nu1 + nu2) sum_n d_n conj(xi_n(nu1) xi_n(nu2))``."""
        if Delta <= 0:
            raise ValueError("Delta must be positive")
        d = np.asarray(d, dtype=complex)
        Om = self.envelope_grid(Omega0, Delta)
        X = self.x_matrices(Om)
        f2 = gaussian_envelope(Om, Omega0, Delta) ** 2
        w = trapezoid_weights(Om.size, self.d_nu)
        n2 = float(np.real(np.sum(w * f2 * np.einsum("m,kmn,n->k", np.conj(d), X, d))))
        return StructuredPacket(d, float(Omega0), float(Delta), 1.0 / math.sqrt(n2), label)

    def packet_amplitudes(self, packet: StructuredPacket) -> tuple[np.ndarray, np.ndarray]:
        """Bound-state amplitude densities ``A_a(Omega)`` of a structured packet.

        The output state carries ``A_a(Omega)`` per unit total energy in bound
        state ``a`` with one photon at ``Omega - w_a``; ``P_a = int |A_a|^2``.
        """
        Om = self.envelope_grid(packet.Omega0, packet.Delta)
        X = self.x_matrices(Om)
        f = gaussian_envelope(Om, packet.Omega0, packet.Delta)
        Xd = np.einsum("kmn,n->km", X, packet.d)
        amps = np.empty((self.n_bound, Om.size), dtype=complex)
        for a in range(self.n_bound):
            av = self.trap_vector(a, Om)
            amps[a] = -2 * math.sqrt(2) * math.pi * packet.norm * f * np.einsum("km,km->k", av, Xd)
        return Om, amps

    def structured_probability(self, packet: StructuredPacket) -> np.ndarray:
        """Trapping probability of every bound state for a structured packet."""
        Om, amps = self.packet_amplitudes(packet)
        w = trapezoid_weights(Om.size, self.d_nu)
        return np.sum(w * np.abs(amps) ** 2, axis=1)

    def structured_density(self, packet: StructuredPacket) -> np.ndarray:
        """Bound-state density matrix ``rho_ab = int A_a conj(A_b) dOmega``."""
        Om, amps = self.packet_amplitudes(packet)
        w = trapezoid_weights(Om.size, self.d_nu)
        return np.einsum("k,ak,bk->ab", w, amps, np.conj(amps))

    def grid_probability(self, packet: GridPacket) -> np.ndarray:
        """Trapping probabilities of a sampled packet (anti-diagonal quadrature).

        ``I(Omega_k) = sum_{i+j=k} Gamma(Omega_k; nu_i, nu_j) psi_ij d_nu`` and
        ``P = 1/2 sum_k |I_k|^2 d_nu``.
        """
        nu, psi = packet.nu, packet.psi
        n = nu.size
        dn = packet.d_nu
        xi = self.table.xi(nu)
        Om = 2 * nu[0] + dn * np.arange(2 * n - 1)
        N = self.system.n
        sums = np.empty((N, 2 * n - 1), dtype=complex)
        w = trapezoid_weights(n, dn)
        diag = np.add.outer(np.arange(n), np.arange(n)).ravel()
        for m in range(N):
            B = ((xi[:, m] * w)[:, None] * (xi[:, m] * w)[None, :] * psi / dn).ravel()
            sums[m] = np.bincount(diag, B.real, 2 * n - 1) + 1j * np.bincount(diag, B.imag, 2 * n - 1)
        out = np.empty(self.n_bound)
        for a in range(self.n_bound):
            av = self.trap_vector(a, Om)
            I = -4 * math.pi * np.einsum("km,mk->k", av, sums)
            out[a] = 0.5 * np.sum(np.abs(I) ** 2) * dn
        return out

    def gamma(self, alpha: int, omega: float, nu1: np.ndarray, nu2: np.ndarray) -> np.ndarray:
        """Trapping amplitude ``Gamma_a(omega; nu1, nu2)``."""
        Omega = omega + float(self.table.omega_b[alpha])
        if _pole_offsets(self.green, Omega) < 1e-6:
            raise PoleProximityError("total energy on a bound-bound pole")
        a = self.trap_vector(alpha, np.array([Omega]))[0]
        return -4 * math.pi * np.sum(a * self.table.xi(nu1) * self.table.xi(nu2), axis=-1)

    def optimal_packet(self, alpha: int, Delta: float, Omega0: float | None = None) -> StructuredPacket:
        """Packet ``f(nu1 + nu2) conj(Gamma_a(Omega0 - w_a; nu1, nu2))``, normalized.

        ``Omega0`` defaults to the maximizer of the single-energy bound.
        """
        if Delta <= 0:
            raise ValueError("Delta must be positive")
        if Omega0 is None:
            _, Omega0 = self.upper_bound(alpha)
        a = self.trap_vector(alpha, np.array([Omega0]))[0]
        return self.structured_packet(np.conj(a), Omega0, Delta, label=f"optimal alpha={alpha}")

    def design_matrices(self, Omega: float) -> DesignMatrices:
        """``X(Omega)`` and ``S_an = -2 sqrt(2) pi sum_m conj(eps_m^a xi_m(Omega - w_a)) [T^-1 X]_mn``."""
        if _pole_offsets(self.green, Omega) < 1e-6:
            raise PoleProximityError("total energy on a bound-bound pole")
        X = self.x_matrices(np.array([Omega]))[0]
        S = np.empty((self.n_bound, self.system.n), dtype=complex)
        for a in range(self.n_bound):
            av = self.trap_vector(a, np.array([Omega]))[0]
            S[a] = -2 * math.sqrt(2) * math.pi * (av @ X)
        return DesignMatrices(float(Omega), S, X)

    def design(self, target: np.ndarray, Omega0: float, Delta: float, cond_limit: float = 1e6) -> DesignResult:
        """Input coefficients that steer trapping into a target superposition.

        Raises:
            IllConditionedError: If ``cond(S) > cond_limit``.
            ValueError: If ``target`` has the wrong length or is zero.
        """
        target = np.asarray(target, dtype=complex)
        if target.shape != (self.n_bound,):
            raise ValueError(f"target must have {self.n_bound} entries")
        if not np.any(target):
            raise ValueError("target must be nonzero")
        dm = self.design_matrices(Omega0)
        cond = float(np.linalg.cond(dm.S))
        if not np.isfinite(cond) or cond > cond_limit:
            raise IllConditionedError(f"design matrix condition number {cond:.3g} exceeds {cond_limit:g}; try another Omega0")
        c_in = np.linalg.lstsq(dm.S, target, rcond=None)[0]
        c_in = c_in / math.sqrt(float(np.real(np.conj(c_in) @ dm.X @ c_in)))
        c_out = dm.S @ c_in
        fid = float(abs(np.vdot(target, c_out)) ** 2 / (np.vdot(target, target).real * np.vdot(c_out, c_out).real))
        packet = self.structured_packet(c_in, Omega0, Delta, label="design")
        return DesignResult(c_in, c_out, fid, cond, float(Omega0), float(Delta), packet)


def fidelity(rho: np.ndarray, target: np.ndarray) -> float:
    """``target^H rho target / (tr(rho) |target|^2)``."""
    target = np.asarray(target, dtype=complex)
    return float(np.real(np.conj(target) @ rho @ target) / (np.trace(rho).real * np.vdot(target, target).real))


# ---------------------------------------------------------------- functional API


def gamma_amplitude(solver: TrapSolver, alpha: int, omega: float, nu1, nu2) -> np.ndarray:
    """``Gamma_alpha(omega; nu1, nu2)``; energy conservation is the caller's job."""
    return solver.gamma(alpha, omega, np.asarray(nu1, dtype=float), np.asarray(nu2, dtype=float))


def trapping_probability(solver: TrapSolver, alpha: int, packet) -> float:
    """Trapping probability of bound state ``alpha`` for any supported packet type."""
    if isinstance(packet, StructuredPacket):
        return float(solver.structured_probability(packet)[alpha])
    if isinstance(packet, GaussianMixturePacket):
        raise TypeError("sample mixture packets on a grid first (GaussianMixturePacket.to_grid)")
    return float(solver.grid_probability(packet)[alpha])


def upper_bound(solver: TrapSolver, alpha: int = 0) -> tuple[float, float]:
    """``(P_ub, Omega*)`` for bound state ``alpha``."""
    return solver.upper_bound(alpha)


def optimal_wavepacket(solver: TrapSolver, alpha: int, Delta: float, Omega0: float | None = None) -> StructuredPacket:
    """Energy-entangled packet approaching the bound as ``Delta -> 0``."""
    return solver.optimal_packet(alpha, Delta, Omega0)


def design_matrices(solver: TrapSolver, Omega: float) -> DesignMatrices:
    return solver.design_matrices(Omega)


def design_input(solver: TrapSolver, target: np.ndarray, Omega0: float, Delta: float) -> DesignResult:
    return solver.design(target, Omega0, Delta)
