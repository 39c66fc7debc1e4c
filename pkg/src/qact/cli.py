"""Command-line driver: ``qact <subcommand> --config run.toml``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 validation failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import chaos as C
from . import fitter as F
from . import structure as S
from . import terms as T
from .action import ActionParams
from .config import RunConfig, load_config
from .errors import ConfigError, DomainError, NumericalError
from .grid import Grid, GridFunction, PotentialSpec, discretize_hamiltonian, eigensolve
from .propagator import (BoundarySet, converged_spectral_amplitude, fmt, stepping_amplitude,
                         write_tables_csv)

log = logging.getLogger("qact")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VALIDATION = 0, 1, 2, 3


class ValidationFailure(Exception):
    pass


# ------------------------------------------------------------ builders

def build_spec(cfg: RunConfig) -> PotentialSpec:
    p = cfg["potential"]
    return PotentialSpec(dict(p["terms"]), p["mass"], p["hbar"], p["dim"])


def _base_grid(cfg: RunConfig) -> Grid:
    g, dim = cfg["grid"], cfg["potential"]["dim"]
    if dim == 1:
        return Grid.line(g["lower"], g["upper"], g["n"])
    return Grid.square(g["lower"], g["upper"], g["n"])


def build_points(cfg: RunConfig) -> np.ndarray:
    tr, dim = cfg["transition"], cfg["potential"]["dim"]
    if tr["points"]:
        pts = np.asarray(tr["points"], dtype=float)
        return pts.reshape(-1) if dim == 1 else pts.reshape(-1, 2)
    if dim == 1:
        if tr["range"]:
            lo, hi, count = tr["range"]
            return np.linspace(lo, hi, int(count))
        return F.default_points_1d()
    return F.default_points_2d(tr["ring_radius"], tr["ring_count"], tr["inner"])


def build_grid(cfg: RunConfig, spec: PotentialSpec, points: np.ndarray | None = None) -> Grid:
    """Configured grid; in 1D the nodes are aligned with equispaced boundary points."""
    grid = _base_grid(cfg)
    if spec.dim == 1 and points is not None and len(points) > 1:
        d = np.diff(np.sort(points))
        if np.allclose(d, d[0], rtol=1e-9):
            g = cfg["grid"]
            try:
                return F.aligned_grid(points, grid.spacing[0], g["lower"], g["upper"],
                                      fixed_lower=spec.singular)
            except DomainError:
                log.warning("no aligned grid found; using the configured grid")
    return grid


def _write_run_info(out: Path, cfg: RunConfig) -> None:
    info = {"version": __version__, "command": cfg.command, "seed": cfg.seed,
            "config": cfg.resolved()}
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _gnuplot(out: Path, name: str, body: str) -> None:
    (out / f"{name}.gp").write_text("set datafile separator ','\nset key autotitle columnhead\n"
                                    + body.strip() + "\n")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


# ------------------------------------------------------------ subcommands

def cmd_spectrum(cfg: RunConfig, out: Path, threads: int) -> None:
    spec = build_spec(cfg)
    grid = _base_grid(cfg)
    k = cfg["spectrum"]["states"] if cfg.get("spectrum") else 10
    data = eigensolve(discretize_hamiltonian(spec, grid), k)
    _write_rows(out / "spectrum.csv", ["n", "E_n"], ((n, float(e)) for n, e in enumerate(data.energies)))
    if cfg.get("spectrum") and cfg["spectrum"]["wavefunctions"]:
        if grid.dim != 1:
            raise ConfigError("[spectrum] wavefunctions are exported for 1D grids only")
        vecs = data.vectors.reshape(data.count, -1)
        _write_rows(out / "wavefunctions.csv", ["x"] + [f"psi_{n}" for n in range(data.count)],
                    ([float(x)] + [float(v) for v in vecs[:, i]] for i, x in enumerate(grid.x)))
    _gnuplot(out, "spectrum", "set xlabel 'n'\nset ylabel 'E_n'\nplot 'spectrum.csv' using 1:2 with points")


def _oracle(kind: str, spec: PotentialSpec, b: BoundarySet) -> np.ndarray:
    m, hb = spec.mass, spec.hbar
    a, c, t = b.sources[:, None, :], b.sinks[None, :, :], b.T
    if kind == "free":
        d2 = ((a - c) ** 2).sum(-1)
        return (m / (2 * np.pi * hb * t)) ** (b.dim / 2) * np.exp(-m * d2 / (2 * hb * t))
    w = np.sqrt(2 * spec.coefficient("v2") / m)
    s = np.sinh(w * t)
    expo = ((a**2 + c**2).sum(-1) * np.cosh(w * t) - 2 * (a * c).sum(-1)) * m * w / (2 * hb * s)
    return (m * w / (2 * np.pi * hb * s)) ** (b.dim / 2) * np.exp(-expo)


def cmd_amplitudes(cfg: RunConfig, out: Path, threads: int) -> None:
    spec = build_spec(cfg)
    pts = build_points(cfg)
    grid = build_grid(cfg, spec, pts)
    amp = cfg.get("amplitudes") or {"backends": ["spectral", "stepping"], "tolerance": 1e-2,
                                     "oracle": "none"}
    if spec.dim != 1 and "spectral" in amp["backends"]:
        raise ConfigError("the spectral backend is available for 1D runs only")
    tables, checks, worst = [], [], 0.0
    op = discretize_hamiltonian(spec, grid)
    for t in sorted(float(v) for v in cfg["transition"]["T"]):
        b = BoundarySet(pts, pts, t)
        got = {}
        for name in amp["backends"]:
            order = 3 if spec.dim == 2 else 1
            got[name] = (converged_spectral_amplitude(op, b) if name == "spectral"
                         else stepping_amplitude(spec, grid, b, order=order))
            tables.append(got[name])
        if len(got) == 2:
            g1, g2 = got["spectral"].G, got["stepping"].G
            diff = float(np.max(np.abs(g1 - g2) / np.abs(g1)))
            worst = max(worst, diff)
            checks.append((t, "spectral-stepping", diff))
        if amp["oracle"] != "none":
            ref = _oracle(amp["oracle"], spec, b)
            for name, tab in got.items():
                checks.append((t, f"{name}-{amp['oracle']}", float(np.max(np.abs(tab.G / ref - 1)))))
    write_tables_csv(out / "amplitudes.csv", tables)
    _write_rows(out / "agreement.csv", ["T", "comparison", "max_rel_diff"], checks)
    _gnuplot(out, "amplitudes", "set logscale y\nset xlabel 'row'\nset ylabel 'G'\n"
             "plot 'amplitudes.csv' using 0:(column('G')) with points")
    if worst > amp["tolerance"]:
        raise NumericalError(f"backends disagree by {worst:.2e} (> {amp['tolerance']:.0e})")


def _fit_scan(cfg: RunConfig, spec: PotentialSpec) -> tuple[F.ParameterScan, Grid, np.ndarray]:
    fitc = cfg["fit"]
    pts = build_points(cfg)
    grid = build_grid(cfg, spec, pts)
    ansatz = tuple(fitc["ansatz"])
    init_terms = {k: v for k, v in spec.terms.items() if k in {T.make_term(a, spec.dim) for a in ansatz}}
    initial = ActionParams(spec.mass, init_terms, {}, spec.hbar, spec.dim)
    backend = fitc["backend"] if spec.dim == 1 else "stepping"
    order = fitc["order"] if spec.dim == 1 else 3
    times = sorted(float(t) for t in cfg["transition"]["T"])

    def reference(t):
        return F.reference_table(spec, grid, BoundarySet(pts, pts, t), backend=backend,
                                 richardson=fitc["richardson"], order=order)

    first = reference(times[0])
    template = F.FitProblem(first, ansatz, initial, fitc["max_iter"], fitc["tol"],
                            simplex_evals=fitc["simplex_evals"])
    cache = {times[0]: first}
    scan = F.scan_T(template, times, lambda t: cache.pop(t, None) or reference(t))
    return scan, grid, pts


def cmd_fit(cfg: RunConfig, out: Path, threads: int) -> None:
    spec = build_spec(cfg)
    scan, _, _ = _fit_scan(cfg, spec)
    for t, msg in scan.failures.items():
        log.warning("T=%s failed: %s", t, msg)
    for r, t in zip(scan.results, scan.times):
        if not r.converged:
            log.warning("T=%s did not converge (flags: %s)", t, ", ".join(r.flags))
    F.write_scan_csv(out / "fit_scan.csv", scan)
    if cfg["fit"]["residuals"]:
        rows = []
        for t, r in zip(scan.times, scan.results):
            rows.extend((t, k, float(v)) for k, v in enumerate(r.residuals))
        _write_rows(out / "residuals.csv", ["T", "pair", "relative_error"], rows)
    names = ",".join(f"'m{n}'" for n in (scan.results[0].params.products() if scan.results else []))
    _gnuplot(out, "fit", f"""
set multiplot layout 1,2
set xlabel 'T'
set ylabel 'm~ v~_k'
do for [c in "{names.replace("'", "")}"] {{ plot 'fit_scan.csv' using 'T':c with linespoints title c }}
set logscale y
set ylabel 'Sigma'
plot 'fit_scan.csv' using 'T':'Sigma' with linespoints
unset multiplot""")
    if not scan.results:
        raise ValidationFailure("every transition time failed")


def _bulk_rel(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    return float(np.abs(a - b)[mask].max() / np.abs(b[mask]).max())


def cmd_structure(cfg: RunConfig, out: Path, threads: int) -> None:
    spec = build_spec(cfg)
    if spec.dim != 1:
        raise ConfigError("structure relations are one-dimensional")
    grid = _base_grid(cfg)
    st = cfg["structure"]
    m, hb = spec.mass, spec.hbar
    data = eigensolve(discretize_hamiltonian(spec, grid), 6)
    psi, E = data.ground, float(data.energies[0])
    x = grid.x
    V = spec(x)
    bulk = S.bulk_mask(psi)
    checks = []

    Vrec = S.reconstruct_classical_potential(psi, E, m, hb)
    checks.append(("potential_round_trip", _bulk_rel(Vrec.values, V, bulk & Vrec.valid), 1e-2))
    mass = S.reconstruct_mass(psi, data.state(1), E, float(data.energies[1]), hb)
    checks.append(("mass_reconstruction", abs(mass.mass - m) / m, 1e-3))

    profile = S.quantum_potential_from_ground_state(psi, E, hb, tuple(st["ansatz"]), m)
    psi2 = S.ground_state_from_quantum_potential(profile)
    checks.append(("ground_state_round_trip", float(np.abs(psi2.values / psi.values - 1)[bulk].max()), 1e-3))
    Q2 = S.quantum_potential_from_ground_state(psi2, E, hb).Q.values
    checks.append(("quantum_potential_round_trip", _bulk_rel(Q2, profile.Q.values, bulk), 1e-3))

    law_profile = profile
    if st["perturb"] != 1.0:  # negative control: a wrong profile must fail the law
        law_profile = replace(profile, Q=GridFunction(grid, profile.Q.values * st["perturb"]),
                              U=GridFunction(grid, profile.U.values * np.sqrt(st["perturb"])))
    law = S.transform_law_residual(spec, law_profile, E)
    scale = np.abs(2 * m * (V - E))[bulk & law.valid].max()
    checks.append(("transform_law", float(np.abs(law.values[bulk & law.valid]).max() / scale), 1e-3))

    ric = S.riccati_residual(psi, spec, E)
    checks.append(("riccati_residual_over_estimate", ric.max_ratio, 10.0))

    pair = S.susy_partner(GridFunction(grid, S.to_susy_units(V, m, hb)))
    e_minus, e_plus = S.partner_spectra(pair, 6)
    checks.append(("susy_spectrum", float(np.abs(e_plus[:5] - e_minus[1:6]).max()), 1e-3))
    susy_profile = S.quantum_potential_from_ground_state(pair.psi_gr, pair.shift, 1.0, (), S.SUSY_MASS)
    checks.append(("susy_quantum_equivalence", S.susy_quantum_equivalence(pair, susy_profile).max_abs, 1e-6))

    S.write_profile_csv(out / "structure.csv", psi, profile, V, pair.V_plus.values, law)
    _write_rows(out / "susy.csv", ["n", "E_minus", "E_plus"],
                ((n, float(e_minus[n]), float(e_plus[n - 1]) if n else float("nan"))
                 for n in range(len(e_minus))))
    _write_rows(out / "structure_checks.csv", ["check", "value", "limit", "pass"],
                ((name, float(v), float(lim), int(v <= lim)) for name, v, lim in checks))
    _gnuplot(out, "structure", "set xlabel 'x'\nplot 'structure.csv' using 'x':'Q' with lines, "
             "'' using 'x':'V_class' with lines, '' using 'x':'V_plus' with lines")
    failed = [name for name, v, lim in checks if not v <= lim]
    if failed:
        raise ValidationFailure("invariant violations: " + ", ".join(failed))


def _integrable_baseline(spec: PotentialSpec) -> PotentialSpec:
    """Drop every term that couples the two coordinates."""
    keep = {t: c for t, c in spec.terms.items() if all(0 in mono for mono in t)}
    return PotentialSpec(keep, spec.mass, spec.hbar, 2)


def _quantum_system(cfg: RunConfig, spec: PotentialSpec, flags: list[str]):
    ch = cfg["chaos"]
    if ch["quantum"] == "none":
        return None
    if ch["quantum"] == "explicit":
        return ActionParams(ch["quantum_mass"], dict(ch["quantum_terms"]), {}, spec.hbar, 2)
    scan, _, _ = _fit_scan(cfg, spec)
    if len(scan.results) < 2:
        raise NumericalError("quantum action needs at least two successful fits")
    F.write_scan_csv(Path(cfg["run"]["out"]) / "fit_scan.csv", scan)
    last, prev = scan.results[-1].params.products(), scan.results[-2].params.products()
    scale = max(abs(v) for v in last.values())
    change = max(abs(last[k] - prev[k]) for k in last) / scale
    if change > 0.01:
        flags.append(f"quantum parameters still moving ({change:.1%} between the two largest T)")
    return scan.results[-1].params


def cmd_chaos(cfg: RunConfig, out: Path, threads: int) -> None:
    spec = build_spec(cfg)
    ch = cfg["chaos"]
    seed = cfg.seed
    flags: list[str] = []
    quantum = _quantum_system(cfg, spec, flags)
    systems = {"classical": C.System(spec)}
    if quantum is not None:
        systems["quantum"] = C.System(quantum)
    baseline = C.System(_integrable_baseline(spec))
    energies = sorted(float(e) for e in ch["energies"])

    def step(E):
        # shared by every system at one energy so baseline and targets match
        return ch["dt"] or min(C.default_dt(s, E, 5e-3) for s in systems.values())

    def threshold(E):
        return C.calibrate_threshold(baseline, E, ch["baseline_samples"], ch["horizon"], seed, 1, step(E))

    def fraction(job):
        name, E, thr = job
        return name, C.chaotic_fraction(systems[name], E, ch["samples"], thr, ch["horizon"], seed, 0,
                                        step(E))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        thresholds = dict(zip(energies, pool.map(threshold, energies)))
        jobs = [(name, E, thresholds[E]) for E in energies for name in systems]
        rows = list(pool.map(fraction, jobs))
    C.write_fraction_csv(out / "fraction.csv", rows, seed)

    E_sec = ch["section_energy"] or energies[len(energies) // 2]
    sections, spectra = {}, {}
    for name, sys_ in systems.items():
        states = C.sample_energy_shell(sys_, E_sec, ch["section_orbits"], seed, 2)
        sections[name] = C.poincare_section(sys_, E_sec, states, ch["section_time"], step(E_sec))
        spectra[name] = C.lyapunov_spectrum(sys_, states[:1], ch["horizon"], step(E_sec))
    C.write_section_csv(out / "section.csv", sections)
    C.write_lyapunov_csv(out / "lyapunov.csv", spectra)
    _gnuplot(out, "chaos", """
set xlabel 'energy'
set ylabel 'chaotic fraction'
plot 'fraction.csv' using 'energy':'fraction':'binomial_error' with yerrorbars
set xlabel 'x'
set ylabel 'p_x'
plot 'section.csv' using 'x':'px' with dots""")
    if flags:
        (out / "flags.txt").write_text("\n".join(flags) + "\n")
        for f in flags:
            log.warning(f)
    bad = [r for _, r in rows if r.flagged]
    if bad:
        raise NumericalError(f"{len(bad)} fraction estimates exceeded the discard budget")


COMMANDS = {
    "spectrum": cmd_spectrum,
    "amplitudes": cmd_amplitudes,
    "fit": cmd_fit,
    "structure": cmd_structure,
    "chaos": cmd_chaos,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qact", description="Quantum action laboratory.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("--seed", type=int, help="64-bit seed (overrides [run] seed)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for independent tasks")
    p.add_argument("--version", action="version", version=f"qact {__version__}")
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="qact: %(levelname)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.sections["run"]["seed"] = args.seed
        if args.out:
            cfg.sections["run"]["out"] = args.out
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        build_spec(cfg)
    except (ConfigError, DomainError) as exc:
        print(f"qact: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_run_info(out, cfg)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](cfg, out, args.threads)
    except (ConfigError, DomainError) as exc:
        print(f"qact: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"qact: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationFailure as exc:
        print(f"qact: validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
