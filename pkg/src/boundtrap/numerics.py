"""Shared numerical kernels.

Quadrature, dense linear solves, root bracketing, 1-D maximization, a
linear delay-differential solver and uniform-grid Fourier helpers. Every
routine is deterministic: identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import fft as sfft
from scipy import integrate as spi
from scipy import optimize, signal

__all__ = [
    "QuadratureResult",
    "SingularMatrixError",
    "integrate",
    "trapezoid_weights",
    "solve_linear",
    "find_root_bracketed",
    "maximize_1d",
    "filon_weights",
    "filon_integral",
    "solve_delay_system",
    "spectrum_to_time",
    "phi_weights",
]


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a dense solve is singular to working precision."""


@dataclass(frozen=True)
class QuadratureResult:
    """Outcome of an adaptive quadrature.

    Attributes:
        value: Complex integral estimate.
        error_estimate: Non-negative absolute error estimate.
        evaluations: Number of integrand evaluations.
        converged: False when the subdivision limit was hit.
    """

    value: complex
    error_estimate: float
    evaluations: int
    converged: bool = True


def integrate(
    f: Callable[[float], complex],
    interval: tuple[float, float],
    tol: float = 1e-10,
    limit: int = 500,
) -> QuadratureResult:
    """Adaptive Gauss-Kronrod quadrature of a complex-valued function.

    The real and imaginary parts are integrated separately so each part
    carries its own QUADPACK error estimate.

    Args:
        f: Scalar complex integrand.
        interval: Integration bounds ``(a, b)``; infinite bounds are allowed.
        tol: Requested tolerance, applied as ``tol * max(1, |value|)``.
        limit: Maximum number of subintervals per part.

    Returns:
        QuadratureResult with the summed error estimate.
    """
    a, b = interval
    parts = []
    err = 0.0
    nev = 0
    converged = True
    for take in (np.real, np.imag):
        out = spi.quad(
            lambda x: float(take(f(x))), a, b,
            epsabs=tol, epsrel=tol, limit=limit, full_output=1,
        )
        parts.append(out[0])
        err += abs(out[1])
        nev += int(out[2]["neval"])
        if len(out) > 3:  # QUADPACK attached a warning message
            converged = False
    value = complex(parts[0], parts[1])
    return QuadratureResult(value, err, nev, converged)


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    """Composite trapezoid weights for ``n`` equally spaced samples."""
    w = np.full(n, h, dtype=float)
    if n > 0:
        w[0] = w[-1] = 0.5 * h
    return w


def solve_linear(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Dense complex solve with a 2-norm condition estimate.

    Args:
        A: Square matrix.
        b: Right-hand side vector (or matrix of column vectors).

    Returns:
        Tuple ``(x, cond)``.

    Raises:
        SingularMatrixError: If ``A`` is singular to working precision.
    """
    A = np.asarray(A, dtype=complex)
    b = np.asarray(b, dtype=complex)
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond * np.finfo(float).eps > 1.0:
        raise SingularMatrixError(f"matrix is singular to working precision (cond={cond:.3g})")
    return np.linalg.solve(A, b), cond


def find_root_bracketed(
    g: Callable[[float], float],
    bracket: tuple[float, float],
    tol: float = 1e-12,
) -> float:
    """Root of a real function inside a sign-changing bracket (Brent).

    Raises:
        ValueError: If ``g`` does not change sign on the bracket.
    """
    a, b = bracket
    ga, gb = g(a), g(b)
    if ga == 0.0:
        return float(a)
    if gb == 0.0:
        return float(b)
    if np.sign(ga) == np.sign(gb):
        raise ValueError("no sign change on bracket")
    return float(optimize.brentq(g, a, b, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500))


def maximize_1d(
    g: Callable[[float], float],
    interval: tuple[float, float],
    tol: float = 1e-6,
    n_scan: int = 401,
    values: np.ndarray | None = None,
    prefer: str = "right",
) -> tuple[float, float]:
    """Grid scan followed by golden-section refinement.

    The result is the best point found near the best grid node; it is not a
    certified global maximum.

    Args:
        g: Objective.
        interval: Scan interval.
        tol: Absolute tolerance of the golden-section stage.
        n_scan: Number of scan nodes.
        values: Optional precomputed objective values on the scan grid.
        prefer: Tie-break among equal grid maxima, ``"right"`` or ``"left"``.

    Returns:
        ``(x_star, g(x_star))``.
    """
    lo, hi = interval
    xs = np.linspace(lo, hi, n_scan)
    vals = np.array([g(x) for x in xs]) if values is None else np.asarray(values, dtype=float)
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    best = vals.max()
    ties = np.flatnonzero(vals >= best - 1e-12 * max(1.0, abs(best)))
    k = int(ties[-1] if prefer == "right" else ties[0])
    if k == 0 or k == n_scan - 1:
        return float(xs[k]), float(vals[k])
    res = optimize.minimize_scalar(
        lambda x: -g(x),
        bracket=(xs[k - 1], xs[k], xs[k + 1]),
        method="golden",
        options={"xtol": tol / max(1.0, abs(xs[k]))},
    )
    x = float(np.clip(res.x, xs[k - 1], xs[k + 1]))
    gx = float(g(x))
    if gx < vals[k]:
        return float(xs[k]), float(vals[k])
    return x, gx


def _endpoint_factor(z: np.ndarray) -> np.ndarray:
    """``int_0^1 (1-u) exp(i z u) du`` evaluated stably."""
    z = np.asarray(z, dtype=complex)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-3
    zs = z[small]
    out[small] = 0.5 + 1j * zs / 6 - zs**2 / 24 - 1j * zs**3 / 120
    zl = z[~small]
    out[~small] = (np.exp(1j * zl) - 1 - 1j * zl) / (1j * zl) ** 2
    return out


def _hat_factor(z: np.ndarray) -> np.ndarray:
    """``int_{-1}^{1} (1-|u|) exp(i z u) du`` = sinc^2(z/2), complex-safe."""
    z = np.asarray(z, dtype=complex)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-3
    zs = z[small]
    out[small] = 1 - zs**2 / 12 + zs**4 / 360
    zl = z[~small]
    out[~small] = (2 * (1 - np.cos(zl))) / zl**2
    return out


def filon_weights(n: int, h: float, freq: complex) -> np.ndarray:
    """Weights for ``int_0^{(n-1)h} q(t) exp(i freq t) dt`` with q piecewise linear.

    The oscillatory factor is integrated exactly, so the error is
    ``O(h^2 q'')`` independently of ``freq``. ``freq`` may be complex
    (damped kernels).
    """
    t = np.arange(n) * h
    z = np.asarray(freq * h, dtype=complex)
    w = h * np.exp(1j * freq * t) * _hat_factor(z.reshape(1))[0]
    w[0] = h * _endpoint_factor(z.reshape(1))[0]
    w[-1] = h * np.exp(1j * freq * t[-1]) * _endpoint_factor(-z.reshape(1))[0]
    return w


def _is_uniform_real(f: np.ndarray) -> bool:
    if np.any(np.abs(f.imag) > 0):
        return False
    d = np.diff(f.real)
    return bool(np.all(np.abs(d - d[0]) <= 1e-9 * max(abs(d[0]), 1e-300)) and d[0] != 0)


def _filon_uniform(flat: np.ndarray, h: float, freqs: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Filon sums on an equispaced frequency grid via one chirp-z transform."""
    f0 = freqs[0].real
    df = freqs[1].real - freqs[0].real
    x = flat * np.exp(1j * f0 * t)[:, None]
    S = signal.czt(x, m=freqs.size, w=np.exp(1j * df * h), a=1.0, axis=0)
    z = freqs * h
    hat = _hat_factor(z)[:, None]
    last = np.exp(1j * freqs * t[-1])[:, None]
    out = h * hat * (S - flat[0][None, :] - last * flat[-1][None, :])
    out += h * _endpoint_factor(z)[:, None] * flat[0][None, :]
    out += h * last * _endpoint_factor(-z)[:, None] * flat[-1][None, :]
    return out


def filon_integral(q: np.ndarray, h: float, freqs: Sequence[complex] | np.ndarray, chunk: int = 64) -> np.ndarray:
    """Evaluate ``int_0^T q(t) exp(i f t) dt`` for many frequencies.

    Args:
        q: Samples on ``t = 0, h, 2h, ...``; extra trailing axes are allowed.
        h: Time step.
        freqs: Frequencies (real or complex).
        chunk: Number of frequencies processed per block.

    Returns:
        Array of shape ``(len(freqs),) + q.shape[1:]``.
    """
    q = np.asarray(q)
    freqs = np.atleast_1d(np.asarray(freqs, dtype=complex))
    n = q.shape[0]
    flat = q.reshape(n, -1)
    t = np.arange(n) * h
    if freqs.size > 2 * chunk and _is_uniform_real(freqs):
        return _filon_uniform(flat, h, freqs, t).reshape((freqs.size,) + q.shape[1:])
    out = np.empty((freqs.size, flat.shape[1]), dtype=complex)
    for s in range(0, freqs.size, chunk):
        f = freqs[s:s + chunk]
        z = f * h
        W = h * np.exp(1j * np.outer(f, t)) * _hat_factor(z)[:, None]
        W[:, 0] = h * _endpoint_factor(z)
        W[:, -1] = h * np.exp(1j * f * t[-1]) * _endpoint_factor(-z)
        out[s:s + chunk] = W @ flat
    return out.reshape((freqs.size,) + q.shape[1:])


def phi_weights(lam: complex, carrier: float, h: float) -> tuple[complex, complex, complex]:
    """Exponential-trapezoid weights for ``y' = -lam y + F(t)``.

    ``F`` is modelled on ``[0, h]`` as ``exp(-i carrier s)`` times a linear
    interpolant of its demodulated envelope, so

        y(h) = c y(0) + w0 F(0) + w1 F(h).

    Returns:
        ``(c, w0, w1)``.
    """
    kap = lam - 1j * carrier
    z = kap * h
    decay = np.exp(-lam * h)
    if abs(z) < 1e-4:
        i0 = h * (1 + z / 2 + z**2 / 6 + z**3 / 24)
        i1 = h * (0.5 + z / 3 + z**2 / 8 + z**3 / 30)
    else:
        ez = np.exp(z)
        i0 = (ez - 1) / kap
        i1 = (ez * (z - 1) + 1) / (kap * z)
    w1 = np.exp(1j * carrier * h) * decay * i1
    w0 = decay * (i0 - i1)
    return complex(decay), complex(w0), complex(w1)


def _delay_steps(delays: Sequence[float], h: float) -> list[int]:
    steps = []
    for d in delays:
        L = int(round(d / h))
        if L < 1 or abs(L * h - d) > 1e-9 * max(1.0, d):
            raise ValueError(f"delay {d} is not a positive multiple of step {h}")
        steps.append(L)
    return steps


def _delay_pass(a: np.ndarray, couplings: list[tuple[int, np.ndarray]], y0: np.ndarray, h: float, n: int) -> np.ndarray:
    """One exponential-trapezoid sweep of ``y' = a*y + sum_j C_j y(t - L_j h)``."""
    N = y0.shape[0]
    y = np.zeros((n + 1, N, y0.shape[1]), dtype=complex)
    y[0] = y0
    c = np.exp(a * h)
    block = min(L for L, _ in couplings) if couplings else n
    i = 0
    while i < n:
        j = min(i + block, n)
        idx = np.arange(i, j + 1)
        Fr = np.zeros((idx.size,) + y0.shape, dtype=complex)
        Fl = np.zeros_like(Fr)
        for L, C in couplings:
            src = idx - L
            right = src >= 0  # right limit: y(0) is seen at t = L h
            left = src > 0  # left limit: the history before t = 0 is zero
            ys = y[np.maximum(src, 0)]
            contrib = np.einsum("mk,tkn->tmn", C, ys)
            Fr += contrib * right[:, None, None]
            Fl += contrib * left[:, None, None]
        for m in range(N):
            b = 0.5 * h * (c[m] * Fr[:-1, m, :] + Fl[1:, m, :])
            zi = (c[m] * y[i, m, :])[None, :]
            out, _ = signal.lfilter([1.0], [1.0, -c[m]], b, axis=0, zi=zi)
            y[i + 1:j + 1, m, :] = out
        i = j
    return y


def solve_delay_system(
    rates: np.ndarray,
    delayed: Sequence[tuple[float, np.ndarray]],
    y0: np.ndarray,
    t_max: float,
    h: float,
    richardson: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate a linear delay system with zero history.

    Solves ``y'(t) = diag(rates) y(t) + sum_j C_j y(t - d_j)`` for
    ``t >= 0`` with ``y(0) = y0`` and ``y(t) = 0`` for ``t < 0``. The
    scheme is an exponential trapezoid rule advanced block-wise (one block
    per shortest delay), which makes each block an explicit linear
    recurrence. The jumps of the delayed terms at ``t = d_j`` are handled
    with one-sided limits so the scheme stays second order, and an optional
    Richardson step lifts it to fourth order on the coarse grid.

    Args:
        rates: Diagonal of the instantaneous generator, shape ``(N,)``.
        delayed: Pairs ``(d_j, C_j)`` with positive delays.
        y0: Initial value, shape ``(N, M)``.
        t_max: Final time.
        h: Step; every delay must be an integer multiple of it.
        richardson: Combine steps ``h`` and ``h/2``.

    Returns:
        ``(t, y)`` with ``y`` of shape ``(n+1, N, M)``.
    """
    rates = np.asarray(rates, dtype=complex)
    y0 = np.asarray(y0, dtype=complex)
    if y0.ndim == 1:
        y0 = y0[:, None]
    n = int(math.ceil(t_max / h - 1e-9))
    delays = [float(d) for d, _ in delayed]
    mats = [np.asarray(C, dtype=complex) for _, C in delayed]
    steps = _delay_steps(delays, h)
    coarse = _delay_pass(rates, list(zip(steps, mats)), y0, h, n)
    if richardson:
        fine = _delay_pass(rates, list(zip([2 * L for L in steps], mats)), y0, h / 2, 2 * n)
        coarse = (4 * fine[::2] - coarse) / 3
    return np.arange(n + 1) * h, coarse


def spectrum_to_time(
    values: np.ndarray,
    omega0: float,
    d_omega: float,
    pad: int = 4,
    window: str | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``int F(w) exp(-i w t) dw`` from uniform samples via FFT.

    Trapezoid quadrature on the sample grid, zero-padded by ``pad`` to refine
    the time grid. ``window`` optionally tapers the samples (``"hann"`` or
    ``"tukey"``) to suppress truncation ringing; ``None`` means rectangular.

    Args:
        values: Samples ``F(omega0 + k d_omega)``, transform along axis 0.
        omega0: First frequency.
        d_omega: Frequency step.
        pad: Zero-padding factor.
        window: Optional taper name.

    Returns:
        ``(t, G)`` with ``t`` in FFT order starting at 0.
    """
    values = np.asarray(values, dtype=complex)
    n = values.shape[0]
    w = trapezoid_weights(n, d_omega)
    if window == "hann":
        w = w * signal.windows.hann(n, sym=True)
    elif window == "tukey":
        w = w * signal.windows.tukey(n, alpha=0.1, sym=True)
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    shape = (n,) + (1,) * (values.ndim - 1)
    m = sfft.next_fast_len(pad * n)
    spec = sfft.fft(values * w.reshape(shape), n=m, axis=0)
    t = 2 * np.pi * sfft.fftfreq(m, d=d_omega)
    phase = np.exp(-1j * omega0 * t).reshape((m,) + (1,) * (values.ndim - 1))
    return t, spec * phase
