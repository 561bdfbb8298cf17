"""Command-line driver.

Usage:
    boundtrap spectral --config system.json --out results/
    boundtrap bound    --config sweep.json  --out results/ --threads 4
    boundtrap design   --config design.json --out results/
    boundtrap fdtd     --config fdtd.json   --out results/
    boundtrap validate --config checks.json --out results/ --seed 7

Every command writes its outputs plus ``manifest.json`` (resolved config,
seed, output list) into ``--out``. Exit codes: 0 success, 2 config error,
3 numerical failure, 4 invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .model import ConfigError, SystemSpec, system_from_dict, system_to_dict
from .numerics import SingularMatrixError
from .scatter import (
    GaussianMixturePacket,
    IllConditionedError,
    PoleProximityError,
    TrapSolver,
    fidelity,
    random_mixture_packet,
)
from .spectral import find_bound_states, overlaps

log = logging.getLogger("boundtrap")

UNITS = "frequencies and energies in units of gamma; times and positions in units of 1/gamma"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INVARIANT = 4


class InvariantBreach(RuntimeError):
    """A physical or numerical invariant failed."""


# ---------------------------------------------------------------- output helpers


def _fmt(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    """CSV with a units comment line, a header row and 12 significant digits."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# units: {UNITS}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    """Inverse of :func:`write_csv` for numeric tables."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rdr = csv.reader(lines)
    header = next(rdr)
    data = np.array([[float(x) for x in r] for r in rdr])
    return header, data


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": float(obj.real), "im": float(obj.imag)}
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path: Path, obj: dict[str, Any]) -> Path:
    payload = {"units": UNITS, **obj}
    path.write_text(json.dumps(_jsonable(payload), indent=2) + "\n")
    return path


def _complex_vector(raw: Any, what: str) -> np.ndarray:
    """Parse ``[1, 0]``, ``[[re, im], ...]`` or ``[{"re":..,"im":..}, ...]``."""
    try:
        out = []
        for v in raw:
            if isinstance(v, dict):
                out.append(complex(float(v["re"]), float(v.get("im", 0.0))))
            elif isinstance(v, (list, tuple)):
                out.append(complex(float(v[0]), float(v[1])))
            else:
                out.append(complex(float(v)))
        return np.array(out, dtype=complex)
    except (TypeError, ValueError, KeyError, IndexError) as exc:
        raise ConfigError(f"malformed {what}: {exc}") from exc


def _section(cfg: dict[str, Any], name: str) -> dict[str, Any]:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    return sec


def _system(cfg: dict[str, Any]) -> SystemSpec:
    raw = cfg.get("system", cfg)
    if not isinstance(raw, dict) or "emitters" not in raw:
        raise ConfigError("config needs a system with an emitter list")
    return system_from_dict(raw)


def _number(sec: dict[str, Any], key: str, default: float | None = None) -> float:
    if key not in sec or sec[key] is None:
        if default is None:
            raise ConfigError(f"missing parameter {key!r}")
        return default
    try:
        return float(sec[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"parameter {key!r} must be a number") from exc


# ---------------------------------------------------------------- spectral


def cmd_spectral(cfg: dict[str, Any], out: Path, ctx: dict[str, Any]) -> list[Path]:
    """Bound states, the scattering-overlap spectrum and an optional delay sweep."""
    system = _system(cfg)
    sec = _section(cfg, "spectral")
    search = find_bound_states(system, return_search=True)
    table = overlaps(system, search.states, n_grid=3)
    records = []
    for a, st in enumerate(search.states):
        records.append({
            "index": a,
            "omega_b": st.omega_b,
            "emitter_amplitudes": st.v,
            "epsilon": table.eps[a],
            "norm_check": st.norm_check,
        })
    files = [write_json(out / "bound_states.json", {
        "system": system_to_dict(system),
        "n_bound": len(records),
        "bound_states": records,
        "rejected_candidates": search.rejected,
    })]
    n_grid = int(sec.get("n_grid", 1001))
    w = np.linspace(*system.frequency_window, n_grid)
    xi = table.xi(w)
    header = ["omega"]
    for n in range(system.n):
        header += [f"abs2_xi_{n + 1}", f"re_xi_{n + 1}", f"im_xi_{n + 1}"]
    rows = []
    for k in range(n_grid):
        r = [w[k]]
        for n in range(system.n):
            r += [abs(xi[k, n]) ** 2, xi[k, n].real, xi[k, n].imag]
        rows.append(r)
    files.append(write_csv(out / "xi_spectrum.csv", header, rows))
    sweep = sec.get("delay_sweep")
    if sweep:
        gamma = _number(sweep, "gamma", 1.0)
        k = int(sweep.get("phase_index", 1))
        try:
            delays = [float(d) for d in sweep["delays"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed delay_sweep: {exc}") from exc
        rows = []
        for td in delays:
            from .model import feedback_system

            s1 = feedback_system(k * math.pi / td, gamma, td)
            st1 = find_bound_states(s1)
            t1 = overlaps(s1, st1, n_grid=3)
            e = abs(t1.eps[0, 0]) if t1.n_bound else 0.0
            rows.append([td, gamma * td, k * math.pi / td, e, 1 / math.sqrt(1 + 2 * gamma * td)])
        files.append(write_csv(out / "epsilon_vs_delay.csv",
                               ["delay", "gamma_td", "omega0", "epsilon", "epsilon_closed_form"], rows))
    return files


# ---------------------------------------------------------------- bound sweep


def bound_point(gamma_td: float, gamma: float, deltas: Sequence[float], phase_index: int = 1,
                alpha: int = 0) -> dict[str, Any]:
    """Upper bound and optimal-packet probabilities for one single-emitter delay."""
    from .model import feedback_system

    td = gamma_td / gamma
    w0 = phase_index * math.pi / td
    sol = TrapSolver.build(feedback_system(w0, gamma, td))
    if sol.n_bound <= alpha:
        raise InvariantBreach(f"no bound state {alpha} at gamma*t_d={gamma_td}")
    p_ub, om = sol.upper_bound(alpha)
    probs = []
    for D in deltas:
        pk = sol.optimal_packet(alpha, D * gamma, om)
        probs.append(float(sol.structured_probability(pk)[alpha]))
    return {"gamma_td": gamma_td, "omega0": w0, "P_ub": p_ub, "Omega_star": om, "P": probs}


def cmd_bound(cfg: dict[str, Any], out: Path, ctx: dict[str, Any]) -> list[Path]:
    """Single-emitter sweep of the trapping upper bound and finite-width optimal inputs."""
    sec = _section(cfg, "bound")
    try:
        tds = [float(x) for x in sec.get("gamma_td", [0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0])]
        deltas = [float(x) for x in sec.get("deltas", [0.4, 0.2, 0.1])]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed bound sweep: {exc}") from exc
    if not tds or any(t <= 0 for t in tds) or any(d <= 0 for d in deltas):
        raise ConfigError("sweep values must be positive")
    gamma = _number(sec, "gamma", 1.0)
    k = int(sec.get("phase_index", 1))
    threads = max(1, int(ctx.get("threads", 1)))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = [pool.submit(bound_point, t, gamma, deltas, k) for t in tds]
            results = [f.result() for f in futs]
    else:
        results = [bound_point(t, gamma, deltas, k) for t in tds]
    header = ["gamma_td", "omega0", "P_ub", "Omega_star"] + [f"P_Delta_{d:g}" for d in deltas]
    rows = [[r["gamma_td"], r["omega0"], r["P_ub"], r["Omega_star"]] + r["P"] for r in results]
    for r in results:
        if any(p > r["P_ub"] + 1e-6 for p in r["P"]):
            raise InvariantBreach(f"probability above the upper bound at gamma*t_d={r['gamma_td']}")
    return [write_csv(out / "trap_bound.csv", header, rows)]


# ---------------------------------------------------------------- design


def cmd_design(cfg: dict[str, Any], out: Path, ctx: dict[str, Any]) -> list[Path]:
    """Design an input that excites a target bound-state superposition."""
    system = _system(cfg)
    sec = _section(cfg, "design")
    sol = TrapSolver.build(system)
    target = _complex_vector(sec.get("target", []), "design target")
    if target.size != sol.n_bound:
        raise ConfigError(f"target has {target.size} entries but the system has {sol.n_bound} bound states")
    if not np.linalg.norm(target) > 0:
        raise ConfigError("design target must be nonzero")
    target = target / np.linalg.norm(target)
    Omega0 = _number(sec, "Omega0")
    Delta = _number(sec, "Delta")
    res = sol.design(target, Omega0, Delta, cond_limit=_number(sec, "cond_limit", 1e6))
    rho = sol.structured_density(res.packet)
    files = [write_json(out / "design.json", {
        "target": target,
        "Omega0": Omega0,
        "Delta": Delta,
        "c_in": res.c_in,
        "c_out": res.c_out,
        "fidelity": res.fidelity,
        "condition_number": res.condition_number,
        "predicted_density": rho,
        "predicted_probability": float(np.trace(rho).real),
        "predicted_fidelity": fidelity(rho, target),
    })]
    if sec.get("verify", False):
        from . import fdtd

        h = _number(sec, "h", 0.01)
        st, ex = fdtd.simulate(sol, res.packet, h=h)
        files.append(write_json(out / "fdtd_check.json", {
            "h": h,
            "n_x": st.lattice.n_x,
            "t_final": st.lattice.t_final,
            "probabilities": ex.probabilities,
            "density": ex.density,
            "fidelity": fidelity(ex.density, target) if ex.probabilities.sum() > 0 else 0.0,
            "residual": ex.residual,
            "norm_drift": st.norms[-1][1] - st.norms[0][1],
        }))
    return files


# ---------------------------------------------------------------- fdtd


def _fdtd_packet(sec: dict[str, Any], sol: TrapSolver, rng: np.random.Generator):
    """Build the input packet and its scattering-theory prediction (or ``None``)."""
    spec = sec.get("packet", {"kind": "zero"})
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return None, np.zeros(sol.n_bound), {"kind": "zero"}
    if kind == "optimal":
        alpha = int(spec.get("alpha", 0))
        if not 0 <= alpha < sol.n_bound:
            raise ConfigError(f"bound-state index {alpha} out of range")
        Delta = _number(spec, "Delta")
        Om = spec.get("Omega0")
        pk = sol.optimal_packet(alpha, Delta, None if Om is None else float(Om))
        return pk, sol.structured_probability(pk), {"kind": kind, "alpha": alpha, "Delta": Delta, "Omega0": pk.Omega0}
    if kind == "design":
        target = _complex_vector(spec.get("target", []), "design target")
        if target.size != sol.n_bound or not np.linalg.norm(target) > 0:
            raise ConfigError("design target length must equal the number of bound states")
        r = sol.design(target / np.linalg.norm(target), _number(spec, "Omega0"), _number(spec, "Delta"))
        return r.packet, sol.structured_probability(r.packet), {"kind": kind, "c_in": r.c_in}
    if kind in ("mixture", "random"):
        if kind == "random":
            center = _number(spec, "center", float(sol.system.omega_ref) + 0.5)
            pk = random_mixture_packet(rng, center, n_terms=int(spec.get("n_terms", 3)),
                                       detuning=_number(spec, "detuning", 1.0), spread=_number(spec, "spread", 3.0))
        else:
            try:
                pk = GaussianMixturePacket(_complex_vector(spec["coeffs"], "coeffs"),
                                           np.asarray(spec["mu"], float), np.asarray(spec["sigma"], float),
                                           np.asarray(spec.get("x0", np.zeros((len(spec["coeffs"]), 2))), float))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"malformed mixture packet: {exc}") from exc
            pk = pk.normalized()
        half = float(np.max(np.abs(pk.mu - np.mean(pk.mu))) + 7 * np.max(pk.sigma))
        c = float(np.mean(pk.mu))
        nu = np.arange(c - half, c + half, 0.01)
        pred = sol.grid_probability(pk.to_grid(nu).normalized())
        return pk, pred, {"kind": kind, "coeffs": pk.coeffs, "mu": pk.mu, "sigma": pk.sigma, "x0": pk.x0}
    raise ConfigError(f"unknown packet kind {kind!r}")


def _snapshot_rows(st, stride: int) -> list[list[float]]:
    lat = st.lattice
    idx = np.arange(0, lat.n_x, stride)
    sub = st.field.rows(lat, idx)[:, idx] + st.S[np.ix_(idx, idx)] + st.S[np.ix_(idx, idx)].T
    x = lat.x[idx]
    rows = []
    for i in range(idx.size):
        for j in range(idx.size):
            rows.append([st.t, x[i], x[j], abs(sub[i, j])])
    return rows


def cmd_fdtd(cfg: dict[str, Any], out: Path, ctx: dict[str, Any]) -> list[Path]:
    """Time-domain run of a two-photon input with trapping extraction."""
    from . import fdtd

    system = _system(cfg)
    sec = _section(cfg, "fdtd")
    sol = TrapSolver.build(system)
    rng = np.random.default_rng(ctx.get("seed", 0))
    packet, predicted, pinfo = _fdtd_packet(sec, sol, rng)
    h = _number(sec, "h", 0.01)
    if packet is None:
        fld = fdtd.ZeroField()
    elif isinstance(packet, GaussianMixturePacket):
        fld = fdtd.MixtureField(packet)
    else:
        fld = fdtd.StructuredField(sol, packet, h)
    lat = fdtd.plan_lattice(system, fld, h, fdtd.decay_time(sol, _number(sec, "settle_tol", 1e-2)),
                            length=_number(sec, "length", 40.0))
    st = fdtd.init_from_wavepacket(fld, lat, system)
    stride = int(sec.get("snapshot_stride", max(1, lat.n_x // 200)))
    times = sorted(float(t) for t in sec.get("snapshot_times", []))
    snaps: list[list[float]] = []
    for t in times:
        k = min(int(round(t / h)), lat.n_steps)
        if k > st.k:
            st.advance(k - st.k)
            st.norms.append((st.t, st.norm()))
        snaps += _snapshot_rows(st, stride)
    fdtd.run(st)
    snaps += _snapshot_rows(st, stride)
    ex = fdtd.extract_trapping(st, sol.table.eps)
    n0 = st.norms[0][1]
    files = [
        write_csv(out / "psi2_snapshot.csv", ["t", "x1", "x2", "abs_psi"], snaps),
        write_csv(out / "norm_drift.csv", ["t", "norm", "drift"], [[t, n, n - n0] for t, n in st.norms]),
    ]
    x = st.lattice.x
    head = ["x"] + [f"abs_psi_emitter_{n + 1}" for n in range(system.n)] + \
        [f"abs_psi_trapped_{a}" for a in range(sol.n_bound)]
    prof = np.concatenate([np.abs(st.psi1), np.abs(ex.psi_tilde)], axis=0)
    files.append(write_csv(out / "psi1_final.csv", head, [[x[i]] + list(prof[:, i]) for i in range(0, x.size, max(1, stride // 4))]))
    files.append(write_json(out / "probabilities.json", {
        "packet": pinfo,
        "lattice": {"h": h, "n_x": lat.n_x, "x_min": lat.x_min, "x_max": lat.x_max, "t_final": lat.t_final},
        "probabilities": ex.probabilities,
        "scatter_prediction": predicted,
        "density": ex.density,
        "residual": ex.residual,
        "norm_initial": n0,
        "norm_final": st.norms[-1][1],
        "norm_drift": st.norms[-1][1] - n0,
        "max_double_excitation": float(np.abs(st.psiE).max()),
    }))
    return files


# ---------------------------------------------------------------- validate


def cmd_validate(cfg: dict[str, Any], out: Path, ctx: dict[str, Any]) -> list[Path]:
    """Run the invariant suite; a failed check is an invariant breach."""
    from .validation import CHECKS, DEFAULT_CHECKS, run_checks

    sec = _section(cfg, "validate")
    names = list(sec.get("checks", DEFAULT_CHECKS))
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown checks: {', '.join(unknown)}")
    results = run_checks(names, seed=int(ctx.get("seed", 0)), options=sec.get("options", {}))
    for r in results:
        print(r.line())
    path = write_json(out / "validate.json", {"checks": [r.to_dict() for r in results],
                                               "all_passed": all(r.passed for r in results)})
    ctx["outputs"] = [path]
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise InvariantBreach("failed checks: " + ", ".join(failed))
    return [path]


COMMANDS = {
    "spectral": cmd_spectral,
    "bound": cmd_bound,
    "design": cmd_design,
    "fdtd": cmd_fdtd,
    "validate": cmd_validate,
}


def _manifest(out: Path, command: str, cfg: dict[str, Any], ctx: dict[str, Any], files: list[Path],
              status: str, elapsed: float) -> None:
    entries = []
    for f in files:
        entries.append({"file": f.name, "sha256": hashlib.sha256(f.read_bytes()).hexdigest()})
    write_json(out / "manifest.json", {
        "command": command,
        "version": __version__,
        "config": cfg,
        "seed": ctx.get("seed", 0),
        "threads": ctx.get("threads", 1),
        "status": status,
        "elapsed_seconds": elapsed,
        "outputs": entries,
    })


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boundtrap", description="Bound-state trapping of two-photon inputs in waveguides with mirrors")
    p.add_argument("command", choices=sorted(COMMANDS), help="what to run")
    p.add_argument("--config", type=Path, required=True, help="JSON config file")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (default: cwd)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for sweeps (default: 1)")
    p.add_argument("--seed", type=int, default=0, help="seed for randomized inputs and suites (default: 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.seed < 0 or args.seed >= 2**64:
        log.error("seed must be an unsigned 64-bit integer")
        return EXIT_CONFIG
    ctx: dict[str, Any] = {"seed": args.seed, "threads": args.threads}
    t0 = time.perf_counter()
    try:
        try:
            cfg = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        args.out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](cfg, args.out, ctx)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except InvariantBreach as exc:
        log.error("invariant breach: %s", exc)
        _manifest(args.out, args.command, cfg, ctx, ctx.get("outputs", []), "invariant breach", time.perf_counter() - t0)
        return EXIT_INVARIANT
    except (SingularMatrixError, IllConditionedError, PoleProximityError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # lattice and parameter violations raised below the config layer
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except AssertionError as exc:
        log.error("invariant breach: %s", exc)
        return EXIT_INVARIANT
    _manifest(args.out, args.command, cfg, ctx, files, "ok", time.perf_counter() - t0)
    log.info("wrote %s", ", ".join(f.name for f in files))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
