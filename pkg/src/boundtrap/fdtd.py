"""Two-excitation time-domain simulation of emitters in front of mirrors.

Interaction-picture state

    |psi> = int int psi(x1, x2) a+(x1) a+(x2) + sum_n int psi_n(x) s_n+ a+(x)
            + sum_{m != n} A_mn s_m+ s_n+

with photon labels fixed in space and the emitter couplings sitting at
points ``a_n(t) = -t_n - t`` and ``b_n(t) = t_n - t`` that sweep left by one
cell per step (``dx = dt = h``). The equations of motion are

    psi_n'  = -(i w_n + g_n) psi_n - 2i sqrt(g_n) [psi(a_n, x) - psi(b_n, x)]
    i A_mn' = (w_m + w_n - i(g_m + g_n)) A_mn
              + 1/2 [sqrt(g_n)(psi_m(a_n) - psi_m(b_n)) + sqrt(g_m)(psi_n(a_m) - psi_n(b_m))]

plus jump conditions: when ``a_n`` (``b_n``) crosses label ``p`` the row and
column ``p`` of ``psi`` change by ``-(+) i/2 sqrt(g_n) psi_n``, and ``psi_n``
jumps by ``-(+) 2i sqrt(g_m) A_mn`` across ``a_m`` (``b_m``). Field values in
the equations are taken before the crossing source's own jump.

The two-photon field is never time-stepped: it equals the initial field
plus the accumulated jumps, ``psi = psi0 + S + S^T``, where ``S`` only
receives row updates. Rows of ``psi0`` are generated on demand.

Norm: ``2 h^2 sum |psi|^2 + h sum_n sum_x |psi_n|^2 + 4 sum_{m<n} |A_mn|^2``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Protocol

import numba
import numpy as np
from scipy import fft as sfft

from .model import SystemSpec
from .numerics import phi_weights
from .scatter import GaussianMixturePacket, StructuredPacket, TrapSolver

__all__ = [
    "Lattice",
    "LatticeError",
    "InitialField",
    "ArrayField",
    "MixtureField",
    "ZeroField",
    "StructuredField",
    "FieldState",
    "TrapExtraction",
    "plan_lattice",
    "init_from_wavepacket",
    "step",
    "run",
    "eval_psi2",
    "extract_trapping",
    "simulate",
]

SQ2 = math.sqrt(2.0)


class LatticeError(ValueError):
    """Lattice incompatible with the system or the initial field."""


@dataclass(frozen=True)
class Lattice:
    """Uniform space-time lattice with ``dx = dt = h``.

    Attributes:
        h: Step.
        K: Index of ``x = 0``; ``x_j = (j - K) h``.
        n_x: Number of sites.
        n_steps: Number of time steps of a run.
    """

    h: float
    K: int
    n_x: int
    n_steps: int

    @property
    def x_min(self) -> float:
        return -self.K * self.h

    @property
    def x_max(self) -> float:
        return (self.n_x - 1 - self.K) * self.h

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.n_x) - self.K) * self.h

    @property
    def t_final(self) -> float:
        return self.n_steps * self.h

    def delay_steps(self, system: SystemSpec) -> np.ndarray:
        L = np.rint(system.delays / self.h).astype(np.int64)
        if np.any(np.abs(L * self.h - system.delays) > 1e-9 * np.maximum(1.0, system.delays)) or np.any(L < 1):
            raise LatticeError("mirror delays must be positive multiples of the step")
        return L

    def check(self, system: SystemSpec) -> np.ndarray:
        """Validate against ``system`` and return the delays in steps."""
        L = self.delay_steps(system)
        if self.K + L.max() > self.n_x - 1:
            raise LatticeError("lattice does not reach the rightmost coupling point")
        if self.K - L.max() - self.n_steps - 1 < 0:
            raise LatticeError("coupling points leave the lattice before the final time")
        return L


class InitialField(Protocol):
    """Initial two-photon field on a lattice."""

    def rows(self, lattice: Lattice, idx: np.ndarray) -> np.ndarray:
        """Rows ``psi0(x_idx, :)``, shape ``(len(idx), n_x)``."""

    def norm2(self, lattice: Lattice) -> float:
        """``h^2 sum |psi0|^2`` over the (unbounded) lattice."""

    def extent(self) -> tuple[float, float]:
        """Interval of positions outside which the field is negligible."""


@dataclass
class ArrayField:
    """Dense initial field given on the lattice (small test problems)."""

    psi: np.ndarray
    scale: float = 1.0

    def rows(self, lattice: Lattice, idx: np.ndarray) -> np.ndarray:
        return self.scale * self.psi[np.asarray(idx)]

    def norm2(self, lattice: Lattice) -> float:
        return float(lattice.h**2 * np.sum(np.abs(self.psi) ** 2)) * self.scale**2

    def extent(self) -> tuple[float, float]:
        return (-np.inf, np.inf)


@dataclass
class ZeroField:
    """Vacuum two-photon field."""

    scale: float = 1.0

    def rows(self, lattice: Lattice, idx: np.ndarray) -> np.ndarray:
        return np.zeros((np.size(idx), lattice.n_x), dtype=complex)

    def norm2(self, lattice: Lattice) -> float:
        return 0.0

    def extent(self) -> tuple[float, float]:
        return (math.nan, math.nan)


@dataclass
class MixtureField:
    """Position form of a :class:`GaussianMixturePacket`, shifted by ``shift``.

    ``psi(x1, x2) = sqrt(2) pi sum_j c_j [p_j1(x1) p_j2(x2) + p_j2(x1) p_j1(x2)]``.
    """

    packet: GaussianMixturePacket
    shift: float = 0.0
    tol: float = 1e-7
    scale: float = 1.0

    def _factors(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.packet
        J = len(p.coeffs)
        u = np.empty((2 * J, x.size), dtype=complex)
        v = np.empty((2 * J, x.size), dtype=complex)
        xs = x - self.shift
        for j in range(J):
            f1 = p.position_factor(xs, j, 0)
            f2 = p.position_factor(xs, j, 1)
            c = SQ2 * math.pi * p.coeffs[j] * p.scale * self.scale
            u[2 * j], v[2 * j] = c * f1, f2
            u[2 * j + 1], v[2 * j + 1] = c * f2, f1
        return u, v

    def rows(self, lattice: Lattice, idx: np.ndarray) -> np.ndarray:
        x = lattice.x
        u, v = self._factors(x)
        return u[:, np.asarray(idx)].T @ v

    def norm2(self, lattice: Lattice) -> float:
        u, v = self._factors(lattice.x)
        gu = np.conj(u) @ u.T
        gv = np.conj(v) @ v.T
        return float(np.real(np.sum(gu * gv))) * lattice.h**2

    def extent(self) -> tuple[float, float]:
        p = self.packet
        w = math.sqrt(2 * math.log(1 / self.tol)) / p.sigma
        return (float(np.min(p.x0 - w)) + self.shift, float(np.max(p.x0 + w)) + self.shift)


@dataclass
class StructuredField:
    """Position form of a :class:`StructuredPacket`.

    ``psi(x1, x2) = sqrt(2) pi N sum_n d_n int da F(a) U_n(x1 - a - s) U_n(x2 - a - s)``
    with ``F(a) = (1/2pi) int f(W) exp(i W a) dW`` (closed form for the
    Gaussian envelope) and the exact single-photon kernels

        U_n(y) = (1/2pi) int conj(xi_n(nu)) exp(i nu y) d nu
               = i/sqrt(2pi) sum_k sqrt(g_k) [conj(G_nk(y + t_k)) - conj(G_nk(y - t_k))],

    with ``G(t) = 0`` for ``t < 0`` and half weight at ``t = 0``. ``U_n`` vanishes
    for ``y < -t_N`` and decays like the continuum Green function for ``y > t_N``.

    Attributes:
        solver: Scattering-theory solver (provides the Green function).
        packet: The structured packet.
        h: Lattice step.
        shift: Translation ``s``; must be a multiple of ``h``.
        tol: Relative truncation threshold for ``F`` and the ``U_n`` tail.
    """

    solver: TrapSolver
    packet: StructuredPacket
    h: float
    shift: float = 0.0
    tol: float = 1e-3
    scale: float = 1.0
    _u: np.ndarray = field(init=False, repr=False)
    _i0: int = field(init=False, repr=False)
    _F: np.ndarray = field(init=False, repr=False)
    _J: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._build_kernels()

    def _green_on(self, t: np.ndarray) -> np.ndarray:
        gr = self.solver.green
        ratio = self.h / gr.h
        if abs(ratio - round(ratio)) > 1e-9:
            raise LatticeError("lattice step must be a multiple of the Green-function step")
        k = np.rint(t / gr.h).astype(int)
        out = gr.bound_rotating(t)
        inside = (k >= 0) & (k < gr.gc.shape[0])
        out[inside] += gr.gc[k[inside]]
        out *= np.exp(-1j * gr.omega_ref * t)[:, None, None]
        out[k < 0] = 0.0
        out[k == 0] *= 0.5
        return out

    def _build_kernels(self) -> None:
        system = self.solver.system
        h = self.h
        L = np.rint(system.delays / h).astype(int)
        gr = self.solver.green
        # tail: last time the continuum part exceeds tol relative to its peak
        mag = np.abs(gr.gc).max(axis=(1, 2))
        above = np.flatnonzero(mag > self.tol * mag.max())
        t_tail = (above[-1] + 1) * gr.h if above.size else 0.0
        i_lo = -int(L.max())
        i_hi = int(math.ceil((t_tail + system.delays.max()) / h))
        y = np.arange(i_lo, i_hi + 1) * h
        g = np.sqrt(system.gammas)
        N = system.n
        u = np.zeros((N, y.size), dtype=complex)
        for k in range(N):
            gp = self._green_on(y + system.delays[k])
            gm = self._green_on(y - system.delays[k])
            u += g[k] * np.conj(gp[:, :, k] - gm[:, :, k]).T
        self._u = 1j / math.sqrt(2 * math.pi) * u
        self._i0 = i_lo
        Delta = self.packet.Delta
        a_w = math.sqrt(2 * math.log(1 / self.tol)) / Delta
        self._J = int(math.ceil(a_w / h))
        a = np.arange(-self._J, self._J + 1) * h
        pref = (math.pi * Delta**2) ** -0.25 * Delta * math.sqrt(2 * math.pi) / (2 * math.pi)
        self._F = pref * np.exp(1j * self.packet.Omega0 * a - 0.5 * (Delta * a) ** 2)

    @property
    def _coef(self) -> float:
        return SQ2 * math.pi * self.packet.norm * self.scale

    def extent(self) -> tuple[float, float]:
        lo = (-self._J + self._i0) * self.h + self.shift
        hi = (self._J + self._i0 + self._u.shape[1] - 1) * self.h + self.shift
        return (lo, hi)

    def rows(self, lattice: Lattice, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        h = self.h
        s = int(round(self.shift / h))
        nu = self._u.shape[1]
        nF = self._F.size
        nfft = sfft.next_fast_len(nF + nu - 1)
        Uf = sfft.fft(self._u, nfft, axis=1)
        d = self.packet.d
        out = np.zeros((idx.size, lattice.n_x), dtype=complex)
        # y-index of x_p relative to a_j: x_p - a_j - s = (p - K - j - s) h
        jj = np.arange(-self._J, self._J + 1)
        for r, p in enumerate(idx):
            yi = (p - lattice.K) - jj - s - self._i0
            ok = (yi >= 0) & (yi < nu)
            if not ok.any():
                continue
            acc = np.zeros(nfft, dtype=complex)
            for n in range(d.size):
                gvec = np.zeros(nF, dtype=complex)
                gvec[ok] = self._F[ok] * self._u[n, yi[ok]]
                acc += d[n] * sfft.fft(gvec, nfft) * Uf[n]
            conv = sfft.ifft(acc)[: nF + nu - 1]
            # conv index m corresponds to x_q - s = (m - J + i0) h
            q0 = lattice.K + s - self._J + self._i0
            lo = max(0, q0)
            hi = min(lattice.n_x, q0 + conv.size)
            if hi > lo:
                out[r, lo:hi] = conv[lo - q0 : hi - q0]
        return self._coef * h * out

    def norm2(self, lattice: Lattice) -> float:
        h = self.h
        d = self.packet.d
        nu = self._u.shape[1]
        nF = self._F.size
        nfft = sfft.next_fast_len(2 * max(nF, nu))
        Ff = sfft.fft(self._F, nfft)
        rF = sfft.ifft(Ff * np.conj(Ff))  # rF[delta] = sum_j F_j conj(F_{j - delta})
        tot = 0j
        Uf = sfft.fft(self._u, nfft, axis=1)
        for n in range(d.size):
            for m in range(d.size):
                # c[delta] = sum_i U_n(i) conj(U_m(i + delta)); stored at index -delta
                c = sfft.ifft(Uf[n] * np.conj(Uf[m]))
                cd = np.roll(c[::-1], 1)
                tot += d[n] * np.conj(d[m]) * np.sum(cd**2 * rF)
        return float(np.real(tot)) * (self._coef * h) ** 2 * h**2


# ---------------------------------------------------------------- kernels


@numba.njit(cache=True)
def _advance(S, P, A, ring, K, L, sg, k0, nsteps, c1, w01, w11, cA, w0A, w1A, R, Rn, D, cross, hist, record):
    N = P.shape[0]
    nx = P.shape[1]
    nr = ring.shape[0]
    LN = L[N - 1]
    ja = np.zeros((N, N), dtype=np.complex128)
    jb = np.zeros((N, N), dtype=np.complex128)
    Dn = np.zeros((N, N), dtype=np.complex128)
    for k in range(k0, k0 + nsteps):
        # jumps of psi_n across the other emitters' coupling points
        for n in range(N):
            for m in range(N):
                if m != n:
                    ja[m, n] = -2j * sg[m] * A[m, n]
                    jb[m, n] = 2j * sg[m] * A[m, n]
                    P[n, K - L[m] - k] += 0.5 * ja[m, n]
                    P[n, K + L[m] - k] += 0.5 * jb[m, n]
        if record:
            for n in range(N):
                for x in range(nx):
                    hist[k, n, x] = P[n, x]
        # two-photon jumps (rows of S; the transpose supplies the columns)
        for n in range(N):
            p = K - L[n] - k
            q = K + L[n] - k
            ca = -0.5j * sg[n]
            cb = 0.5j * sg[n]
            for x in range(nx):
                S[p, x] += ca * P[n, x]
                S[q, x] += cb * P[n, x]
            # the column jumps make the coupling rows discontinuous in time at
            # the crossed labels; switch R there to the right limit
            for m in range(N):
                pa = K - L[m] - k
                pb = K + L[m] - k
                R[m, p] += ca * (P[n, pa] - P[n, pb])
                R[m, q] += cb * (P[n, pa] - P[n, pb])
        for n in range(N):
            for m in range(N):
                if m != n:
                    P[n, K - L[m] - k] += 0.5 * ja[m, n]
                    P[n, K + L[m] - k] += 0.5 * jb[m, n]
        # the rightmost coupling point passes each row last
        q = K + LN - k
        acc = 0j
        for x in range(nx):
            acc += np.conj(ring[q % nr, x]) * S[q, x]
        cross[0] += acc
        # coupling rows at the next time, before their jumps
        for n in range(N):
            pa = K - L[n] - k - 1
            pb = K + L[n] - k - 1
            for x in range(nx):
                Rn[n, x] = (ring[pa % nr, x] + S[pa, x] + S[x, pa]) - (ring[pb % nr, x] + S[pb, x] + S[x, pb])
        for n in range(N):
            for x in range(nx):
                P[n, x] = c1[n] * P[n, x] - 2j * sg[n] * (w01[n] * R[n, x] + w11[n] * Rn[n, x])
                R[n, x] = Rn[n, x]
        for m in range(N):
            for n in range(N):
                if m != n:
                    Dn[m, n] = 0.5 * (
                        sg[n] * (P[m, K - L[n] - k - 1] - P[m, K + L[n] - k - 1])
                        + sg[m] * (P[n, K - L[m] - k - 1] - P[n, K + L[m] - k - 1])
                    )
                else:
                    Dn[m, n] = 0.0
        for m in range(N):
            for n in range(N):
                A[m, n] = cA[m, n] * A[m, n] - 1j * (w0A[m, n] * D[m, n] + w1A[m, n] * Dn[m, n])
                D[m, n] = Dn[m, n]


@numba.njit(cache=True)
def _sym_norm2(S):
    """``sum |S + S^T|^2`` with cache-friendly tiles."""
    n = S.shape[0]
    B = 64
    tot = 0.0
    for i0 in range(0, n, B):
        for j0 in range(i0, n, B):
            for i in range(i0, min(i0 + B, n)):
                jstart = max(j0, i)
                for j in range(jstart, min(j0 + B, n)):
                    v = S[i, j] + S[j, i]
                    a = v.real * v.real + v.imag * v.imag
                    tot += a if i == j else 2.0 * a
    return tot


@numba.njit(cache=True)
def _cross_rows(S, ring, rows):
    acc = 0j
    nr = ring.shape[0]
    for p in rows:
        for x in range(S.shape[1]):
            acc += np.conj(ring[p % nr, x]) * S[p, x]
    return acc


# ---------------------------------------------------------------- state


def _weights(lam: complex, carrier: float, h: float, scheme: str) -> tuple[complex, complex, complex]:
    if scheme == "trapezoid":
        return phi_weights(lam, carrier, h)
    if scheme == "euler":
        c = complex(np.exp(-lam * h))
        w0 = (1 - c) / lam if abs(lam * h) > 1e-8 else h
        return c, complex(w0), 0j
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass
class FieldState:
    """Mutable two-excitation state.

    Attributes:
        lattice: Lattice.
        system: Emitter system.
        field: Initial two-photon field provider.
        S: Accumulated row jumps of the two-photon field.
        psi1: One-photon-one-excitation amplitudes ``psi_n(x)``, shape ``(N, n_x)``.
        psiE: Doubly excited amplitudes ``A_mn`` (zero diagonal).
        k: Current step index; the state describes ``t = k h`` before the
            jumps occurring at that instant.
        norm0: ``h^2 sum |psi0|^2`` after renormalization.
        history: Per-step ``psi_n`` at the jump instants (optional).
    """

    lattice: Lattice
    system: SystemSpec
    field: InitialField
    S: np.ndarray
    psi1: np.ndarray
    psiE: np.ndarray
    L: np.ndarray
    scheme: str = "trapezoid"
    k: int = 0
    norm0: float = 0.0
    cross: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.complex128))
    history: np.ndarray | None = None
    norms: list[tuple[float, float]] = field(default_factory=list)
    _ring: np.ndarray | None = field(default=None, repr=False)
    _ring_lo: int = field(default=0, repr=False)
    _R: np.ndarray | None = field(default=None, repr=False)
    _D: np.ndarray | None = field(default=None, repr=False)
    batch: int = 64

    @property
    def t(self) -> float:
        return self.k * self.lattice.h

    def _coefs(self):
        s = self.system
        h = self.lattice.h
        N = s.n
        c1 = np.empty(N, complex)
        w01 = np.empty(N, complex)
        w11 = np.empty(N, complex)
        for n in range(N):
            c1[n], w01[n], w11[n] = _weights(1j * s.omegas[n] + s.gammas[n], s.omegas[n], h, self.scheme)
        cA = np.zeros((N, N), complex)
        w0A = np.zeros((N, N), complex)
        w1A = np.zeros((N, N), complex)
        for m in range(N):
            for n in range(N):
                if m != n:
                    lam = 1j * (s.omegas[m] + s.omegas[n]) + s.gammas[m] + s.gammas[n]
                    cA[m, n], w0A[m, n], w1A[m, n] = _weights(lam, s.omegas[m] + s.omegas[n], h, self.scheme)
        return c1, w01, w11, cA, w0A, w1A

    def _ring_size(self) -> int:
        return 2 * int(self.L.max()) + self.batch + 4

    def _ensure_rows(self, lowest: int) -> None:
        """Generate initial-field rows down to index ``lowest`` into the ring buffer."""
        lat = self.lattice
        nr = self._ring_size()
        if self._ring is None:
            self._ring = np.zeros((nr, lat.n_x), dtype=np.complex128)
            top = lat.K + int(self.L.max())
            idx = np.arange(max(lowest, 0), top + 1)
            self._ring[idx % nr] = self.field.rows(lat, idx)
            self._ring_lo = max(lowest, 0)
            return
        if lowest >= self._ring_lo:
            return
        idx = np.arange(max(lowest, 0), self._ring_lo)
        if idx.size:
            self._ring[idx % nr] = self.field.rows(lat, idx)
        self._ring_lo = max(lowest, 0)

    def _row(self, p: int) -> np.ndarray:
        return self._ring[p % self._ring.shape[0]] + self.S[p] + self.S[:, p]

    def _init_coupling_rows(self) -> None:
        N = self.system.n
        K = self.lattice.K
        self._R = np.empty((N, self.lattice.n_x), dtype=np.complex128)
        for n in range(N):
            pa = K - int(self.L[n]) - self.k
            pb = K + int(self.L[n]) - self.k
            self._R[n] = self._row(pa) - self._row(pb)
        self._D = np.zeros((N, N), dtype=np.complex128)
        for m in range(N):
            for n in range(N):
                if m != n:
                    P = self.psi1
                    self._D[m, n] = 0.5 * (
                        math.sqrt(self.system.gammas[n]) * (P[m, K - self.L[n] - self.k] - P[m, K + self.L[n] - self.k])
                        + math.sqrt(self.system.gammas[m]) * (P[n, K - self.L[m] - self.k] - P[n, K + self.L[m] - self.k])
                    )

    def advance(self, nsteps: int) -> None:
        """Advance ``nsteps`` steps."""
        lat = self.lattice
        if self.k + nsteps > lat.n_steps:
            raise LatticeError("coupling points would leave the lattice")
        coefs = self._coefs()
        sg = np.sqrt(self.system.gammas)
        Ln = int(self.L.max())
        if self._R is None:
            self._ensure_rows(lat.K - Ln - self.k - self.batch - 1)
            self._init_coupling_rows()
        Rn = np.empty_like(self._R)
        done = 0
        hist = self.history if self.history is not None else np.zeros((1, 1, 1), dtype=np.complex128)
        while done < nsteps:
            b = min(self.batch, nsteps - done)
            self._ensure_rows(lat.K - Ln - (self.k + b) - 1)
            _advance(self.S, self.psi1, self.psiE, self._ring, lat.K, self.L, sg, self.k, b, *coefs,
                     self._R, Rn, self._D, self.cross, hist, self.history is not None)
            self.k += b
            done += b

    def norm(self) -> float:
        """Discrete norm of the full state at the current step."""
        h = self.lattice.h
        K = self.lattice.K
        Ln = int(self.L.max())
        if self._ring is None:
            cross = 0j
        else:
            pending = np.arange(max(K - Ln - self.k, 0), K + Ln - self.k + 1)
            cross = self.cross[0] + _cross_rows(self.S, self._ring, pending)
        two = self.norm0 + h**2 * (_sym_norm2(self.S) + 4 * cross.real)
        one = h * float(np.sum(np.abs(self.psi1) ** 2))
        N = self.system.n
        iu = np.triu_indices(N, 1)
        exc = 4 * float(np.sum(np.abs(self.psiE[iu]) ** 2))
        return 2 * two + one + exc

    def psi2_rows(self, idx: np.ndarray) -> np.ndarray:
        """Current two-photon field on rows ``idx`` (jumps at the current instant excluded)."""
        idx = np.asarray(idx)
        base = self.field.rows(self.lattice, idx)
        return base + self.S[idx] + self.S[:, idx].T


def init_from_wavepacket(
    field_: InitialField,
    lattice: Lattice,
    system: SystemSpec,
    scheme: str = "trapezoid",
    record_history: bool = False,
    renormalize: bool = True,
    dtype=np.complex64,
) -> FieldState:
    """Empty emitters, the given two-photon field renormalized on the lattice.

    Raises:
        LatticeError: If the field reaches the coupling region ``x > -t_N``
            or the lattice is inconsistent with the system.
    """
    L = lattice.check(system)
    lo, hi = field_.extent()
    t_N = float(system.delays.max())
    if np.isfinite(hi) and hi > -t_N:
        raise LatticeError(f"initial field extends to x={hi:.4g}, beyond the first coupling point {-t_N:.4g}")
    if np.isfinite(lo) and lo < lattice.x_min:
        raise LatticeError(f"initial field starts at x={lo:.4g}, left of the lattice edge {lattice.x_min:.4g}")
    n2 = field_.norm2(lattice)
    if renormalize and n2 > 0:
        # the two-photon part carries weight 2 in the norm
        field_.scale = getattr(field_, "scale", 1.0) / math.sqrt(2 * n2)
        n2 = field_.norm2(lattice)
    N = system.n
    S = np.zeros((lattice.n_x, lattice.n_x), dtype=dtype)
    hist = np.zeros((lattice.n_steps + 1, N, lattice.n_x), dtype=np.complex128) if record_history else None
    st = FieldState(lattice, system, field_, S, np.zeros((N, lattice.n_x), complex), np.zeros((N, N), complex), L,
                    scheme=scheme, norm0=n2, history=hist)
    st.norms.append((0.0, st.norm()))
    return st


def step(state: FieldState, system: SystemSpec | None = None) -> FieldState:
    """Advance the state by one lattice step in place and return it."""
    state.advance(1)
    return state


def run(
    state: FieldState,
    n_steps: int | None = None,
    n_checkpoints: int = 4,
    warn_tol: float = 1e-3,
) -> FieldState:
    """Advance to the end of the lattice, recording the norm at checkpoints.

    A warning is issued when the doubly excited amplitudes have not decayed
    below ``warn_tol`` at the end.
    """
    total = state.lattice.n_steps - state.k if n_steps is None else n_steps
    marks = np.linspace(0, total, n_checkpoints + 1).astype(int)
    for a, b in zip(marks[:-1], marks[1:]):
        if b > a:
            state.advance(int(b - a))
            state.norms.append((state.t, state.norm()))
    assert not np.any(np.diag(state.psiE)), "doubly excited amplitude of a single emitter"
    if state.system.n > 1 and np.abs(state.psiE).max() > warn_tol:
        warnings.warn("doubly excited amplitudes have not decayed; increase the final time", RuntimeWarning, stacklevel=2)
    return state


def eval_psi2(state: FieldState, i1: int, i2: int, k: int | None = None, current_weight: float = 0.5) -> complex:
    """Two-photon field at lattice sites ``(i1, i2)`` and step ``k`` from the recorded history.

    ``psi(x1, x2; t_k) = psi0 + sum over coupling-point crossings of either
    label at earlier steps of -(+) i/2 sqrt(g_n) psi_n(other label)``, with
    crossings at step ``k`` itself weighted by ``current_weight``.

    Raises:
        ValueError: Without recorded history or for ``k`` beyond it.
    """
    if state.history is None:
        raise ValueError("history was not recorded")
    k = state.k if k is None else k
    if k > state.k:
        raise ValueError("requested time lies beyond the recorded history")
    lat = state.lattice
    val = complex(state.field.rows(lat, np.array([i1]))[0, i2])
    sg = np.sqrt(state.system.gammas)
    for n in range(state.system.n):
        for sign, base in ((-1.0, lat.K - int(state.L[n])), (1.0, lat.K + int(state.L[n]))):
            for lab, other in ((i1, i2), (i2, i1)):
                kk = base - lab
                if 0 <= kk <= k:
                    w = current_weight if kk == k else 1.0
                    if kk == k and k >= state.k:
                        # the midpoint value at the current instant is not stored yet
                        continue
                    val += w * sign * 0.5j * sg[n] * state.history[kk, n, other]
    return val


@dataclass
class TrapExtraction:
    """Bound-state-resolved late-time field.

    Attributes:
        psi_tilde: ``psi~_a(x)``, shape ``(N_b, n_x)``.
        probabilities: ``h sum_x |psi~_a|^2``.
        density: ``rho_ab = h sum_x psi~_a conj(psi~_b)``.
        residual: Relative least-squares residual of ``psi_n = sum_a eps_n^a psi~_a``.
    """

    psi_tilde: np.ndarray
    probabilities: np.ndarray
    density: np.ndarray
    residual: float


def extract_trapping(state: FieldState, eps: np.ndarray) -> TrapExtraction:
    """Project the late-time emitter amplitudes onto the bound states.

    Raises:
        np.linalg.LinAlgError: If the overlap matrix is rank-deficient.
    """
    eps = np.asarray(eps, dtype=complex)
    E = eps.T  # psi_n = sum_a eps_n^a psi~_a
    if eps.shape[0] == 0:
        return TrapExtraction(np.zeros((0, state.lattice.n_x)), np.zeros(0), np.zeros((0, 0)), 0.0)
    if np.linalg.matrix_rank(E) < eps.shape[0]:
        raise np.linalg.LinAlgError("bound-state overlap matrix is rank-deficient")
    pt = np.linalg.pinv(E) @ state.psi1
    h = state.lattice.h
    rho = h * pt @ np.conj(pt).T
    fit = E @ pt
    nrm = np.linalg.norm(state.psi1)
    res = float(np.linalg.norm(state.psi1 - fit) / nrm) if nrm > 0 else 0.0
    return TrapExtraction(pt, np.real(np.diag(rho)).copy(), rho, res)


def decay_time(solver: TrapSolver, tol: float = 1e-3) -> float:
    """Time after which the continuum Green function stays below ``tol`` of its peak."""
    mag = np.abs(solver.green.gc).max(axis=(1, 2))
    above = np.flatnonzero(mag > tol * mag.max())
    return float((above[-1] + 1) * solver.green.h) if above.size else 0.0


def plan_lattice(system: SystemSpec, field_, h: float, settle: float, margin: int = 4, length: float = 80.0) -> Lattice:
    """Place the field left of the coupling region and size the lattice.

    The field is translated (``field_.shift``) so that its right edge sits
    ``margin`` cells left of ``-t_N``. The lattice then extends from ``t_N``
    down to the field's left edge minus ``settle``, and the run lasts until
    the leftmost coupling point reaches that edge. Fields without finite
    support (:class:`ZeroField`) get a lattice of the given ``length``
    left of ``-t_N``.
    """
    L = np.rint(system.delays / h).astype(int)
    LN = int(L.max())
    lo, hi = field_.extent()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        K = LN + margin + int(math.ceil(length / h))
        return Lattice(h, K, K + LN + margin + 1, K - LN - 2)
    target = -LN - margin
    shift_cells = target - int(math.ceil(hi / h - 1e-9))
    field_.shift = getattr(field_, "shift", 0.0) + shift_cells * h
    lo, hi = field_.extent()
    left_cell = int(math.floor(lo / h)) - int(math.ceil(settle / h)) - margin
    K = -left_cell
    n_x = K + LN + margin + 1
    n_steps = K - LN - 2
    return Lattice(h, K, n_x, n_steps)


def simulate(
    solver: TrapSolver,
    packet: StructuredPacket | GaussianMixturePacket | None,
    h: float = 0.01,
    scheme: str = "trapezoid",
    settle_tol: float = 1e-2,
    dtype=np.complex64,
) -> tuple[FieldState, TrapExtraction]:
    """Plan, initialize, run and extract in one call."""
    if isinstance(packet, StructuredPacket):
        fld = StructuredField(solver, packet, h)
    elif packet is None:
        fld = ZeroField()
    else:
        fld = MixtureField(packet)
    lat = plan_lattice(solver.system, fld, h, decay_time(solver, settle_tol))
    st = init_from_wavepacket(fld, lat, solver.system, scheme=scheme, dtype=dtype)
    run(st)
    return st, extract_trapping(st, solver.table.eps)
