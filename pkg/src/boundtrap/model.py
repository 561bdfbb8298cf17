"""System description: emitters, mirror delays and waveguide couplings.

Units: group velocity 1, frequencies in units of a reference decay rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "EmitterSpec",
    "SystemSpec",
    "ConfigError",
    "validate",
    "bound_state_condition",
    "coupling_value",
    "coupling_vector",
    "is_degenerate_feedback",
    "feedback_system",
    "system_from_dict",
    "system_to_dict",
    "load_system",
]

WINDOW_HALF_WIDTH = 20.0


class ConfigError(ValueError):
    """Invalid system or run configuration."""


@dataclass(frozen=True)
class EmitterSpec:
    """One two-level emitter in front of a mirror.

    Attributes:
        omega: Transition frequency.
        gamma: Decay rate into the waveguide, >= 0.
        delay: Emitter-mirror delay t_n, > 0.
    """

    omega: float
    gamma: float
    delay: float


@dataclass(frozen=True)
class SystemSpec:
    """Ordered emitters plus the continuum window.

    Attributes:
        emitters: Emitters ordered by increasing delay.
        coupling_kind: ``"feedback"`` (mirror-terminated waveguide) or ``"custom"``.
        window: Frequency interval used for every continuum integral. ``None``
            selects ``mean(omega) +/- 20 max(gamma)``.
        custom_coupling: For ``"custom"`` systems, a map ``(n, omega) -> V_n(omega)``
            vectorized over ``omega`` (0-based ``n``).
        custom_principal: Optional principal-value part of the self-energy,
            ``(omega) -> N x N`` matrix. Computed by quadrature when absent.
    """

    emitters: tuple[EmitterSpec, ...]
    coupling_kind: str = "feedback"
    window: tuple[float, float] | None = None
    custom_coupling: Callable[[int, np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    custom_principal: Callable[[float], np.ndarray] | None = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return len(self.emitters)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([e.omega for e in self.emitters], dtype=float)

    @property
    def gammas(self) -> np.ndarray:
        return np.array([e.gamma for e in self.emitters], dtype=float)

    @property
    def delays(self) -> np.ndarray:
        return np.array([e.delay for e in self.emitters], dtype=float)

    @property
    def omega_ref(self) -> float:
        return float(np.mean(self.omegas))

    @property
    def gamma_max(self) -> float:
        return float(np.max(self.gammas)) if self.emitters else 0.0

    @property
    def frequency_window(self) -> tuple[float, float]:
        if self.window is not None:
            return (float(self.window[0]), float(self.window[1]))
        half = WINDOW_HALF_WIDTH * max(self.gamma_max, 1e-12)
        return (float(self.omegas.min()) - half, float(self.omegas.max()) + half)


def feedback_system(
    omega: float | Sequence[float],
    gamma: float | Sequence[float],
    delays: float | Sequence[float],
    window: tuple[float, float] | None = None,
) -> SystemSpec:
    """Convenience constructor; scalars are broadcast over the emitters."""
    d = np.atleast_1d(np.asarray(delays, dtype=float))
    w = np.broadcast_to(np.asarray(omega, dtype=float), d.shape)
    g = np.broadcast_to(np.asarray(gamma, dtype=float), d.shape)
    ems = tuple(EmitterSpec(float(a), float(b), float(c)) for a, b, c in zip(w, g, d))
    return SystemSpec(ems, "feedback", window)


def validate(system: SystemSpec) -> list[str]:
    """Check every structural invariant of a system.

    Returns:
        Human-readable diagnostics; an empty list means the system is valid.
        Emitter indices are 1-based.
    """
    out: list[str] = []
    if not system.emitters:
        out.append("no emitters")
        return out
    if system.coupling_kind not in ("feedback", "custom"):
        out.append(f"unknown coupling kind {system.coupling_kind!r}")
    if system.coupling_kind == "custom" and system.custom_coupling is None:
        out.append("custom coupling kind requires a coupling function")
    for i, e in enumerate(system.emitters, start=1):
        if not math.isfinite(e.omega):
            out.append(f"non-finite frequency @ emitter {i}")
        if not math.isfinite(e.gamma) or e.gamma < 0:
            out.append(f"negative decay rate @ emitter {i}")
        if not math.isfinite(e.delay) or e.delay <= 0:
            out.append(f"non-positive delay @ emitter {i}")
    d = system.delays
    if np.any(np.diff(d) <= 0):
        out.append("delays not strictly increasing")
    lo, hi = system.frequency_window
    if not lo < hi:
        out.append("empty frequency window")
    elif np.any((system.omegas < lo) | (system.omegas > hi)):
        out.append("frequency window does not contain all emitter frequencies")
    return out


def bound_state_condition(system: SystemSpec, tol: float = 1e-12) -> list[bool]:
    """Per-emitter commensurability of frequency and mirror delay.

    Emitter ``k`` passes when ``omega_k t_k`` lies within ``tol * pi`` of a
    multiple of pi, which makes its coupling vanish at its own frequency.
    """
    out = []
    for e in system.emitters:
        r = math.remainder(e.omega * e.delay, math.pi)
        out.append(abs(r) <= tol * math.pi)
    return out


def is_degenerate_feedback(system: SystemSpec, tol: float = 1e-12) -> bool:
    """All emitters share one frequency commensurate with every mirror delay."""
    if system.coupling_kind != "feedback" or not system.emitters:
        return False
    w = system.omegas
    same = np.all(np.abs(w - w[0]) <= tol * max(1.0, abs(w[0])))
    return bool(same and all(bound_state_condition(system, tol)))


def coupling_vector(system: SystemSpec, omega: float | np.ndarray) -> np.ndarray:
    """All couplings ``V_n(omega)``, shape ``(N,) + omega.shape``."""
    w = np.asarray(omega, dtype=float)
    if system.coupling_kind == "custom":
        return np.stack([np.asarray(system.custom_coupling(n, w), dtype=complex) for n in range(system.n)])
    g = np.sqrt(system.gammas).reshape((-1,) + (1,) * w.ndim)
    t = system.delays.reshape((-1,) + (1,) * w.ndim)
    return 2j * g * np.sin(w[None] * t)


def coupling_value(system: SystemSpec, n: int, omega: float) -> complex:
    """Coupling ``V_n(omega)`` of emitter ``n`` (1-based).

    Raises:
        IndexError: If ``n`` is outside ``1..N``.
    """
    if not 1 <= n <= system.n:
        raise IndexError(f"emitter index {n} outside 1..{system.n}")
    return complex(coupling_vector(system, np.array([omega]))[n - 1, 0])


def system_from_dict(cfg: dict[str, Any]) -> SystemSpec:
    """Build a feedback system from the JSON config shape.

    Expected keys: ``emitters`` (list of ``{omega, gamma, delay}``) and an
    optional ``window`` (``{min, max}``).

    Raises:
        ConfigError: On missing or malformed fields or invariant violations.
    """
    try:
        raw = cfg["emitters"]
        ems = tuple(EmitterSpec(float(e["omega"]), float(e["gamma"]), float(e["delay"])) for e in raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed emitter list: {exc}") from exc
    window = None
    if cfg.get("window") is not None:
        try:
            window = (float(cfg["window"]["min"]), float(cfg["window"]["max"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed window: {exc}") from exc
    system = SystemSpec(ems, "feedback", window)
    problems = validate(system)
    if problems:
        raise ConfigError("; ".join(problems))
    return system


def system_to_dict(system: SystemSpec) -> dict[str, Any]:
    lo, hi = system.frequency_window
    return {
        "emitters": [{"omega": e.omega, "gamma": e.gamma, "delay": e.delay} for e in system.emitters],
        "window": {"min": lo, "max": hi},
    }


def load_system(path: str | Path) -> SystemSpec:
    """Read a system from a JSON config file."""
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return system_from_dict(cfg)
