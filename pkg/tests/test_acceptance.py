"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

The lines are collected into an "acceptance criteria" section at the end of the
pytest run (and printed inline with ``-s``).  Runtime budgets are part of the
criteria and are asserted after the numerical check.
"""
import filecmp
import time
from pathlib import Path

import numpy as np
import pytest

from qact import chaos as C
from qact import cli
from qact import fitter as F
from qact import structure as S
from qact.action import ActionParams
from qact.config import load_config
from qact.grid import Grid, GridFunction, PotentialSpec, discretize_hamiltonian, eigensolve
from qact.propagator import BoundarySet

import oracles

ROOT = Path(__file__).resolve().parents[1]
ISO_TIMES = (0.1, 0.2, 0.4, 0.7, 1.0, 1.5, 2.5, 5.0, 8.0)
ISO_ANSATZ = ("v-4", "v-2", "v2", "v4")
SPURIOUS_2D = ("v11", "v13", "v24", "v44")

CRITERIA = {
    1: ("free and harmonic kernels against closed forms", 60),
    2: ("isotonic ground energy", 60),
    3: ("quadratic actions recovered from harmonic tables", 300),
    4: ("isotonic error profile", 1800),
    5: ("asymptotic isotonic products", 1800),
    6: ("structure round trips", 300),
    7: ("SUSY partner spectra and W^2 = Q", 300),
    8: ("integrable baseline is never chaotic", 600),
    9: ("classical vs quantum-action chaotic fraction", 7200),
    10: ("spurious 2D couplings stay small", 3600),
    11: ("byte-identical reruns", None),
}


class Criterion:
    def __init__(self, number, sink):
        self.number = number
        self.title, self.budget = CRITERIA[number]
        self.sink = sink
        self.start = time.perf_counter()
        self.done = False

    def check(self, ok, detail, shared_seconds=0.0):
        """Record and assert. ``shared_seconds`` adds time spent in module fixtures."""
        elapsed = time.perf_counter() - self.start + shared_seconds
        in_time = self.budget is None or elapsed <= self.budget
        passed = bool(ok) and in_time
        line = (f"criterion {self.number:2d}  {'PASS' if passed else 'FAIL'}  {self.title}: "
                f"{detail} [{elapsed:.0f} s]")
        if not in_time:
            line += f" over the {self.budget} s budget"
        print(line)
        self.sink[self.number] = line
        self.done = True
        assert ok, detail
        assert in_time, f"took {elapsed:.0f} s, budget {self.budget} s"


@pytest.fixture
def criterion(request):
    number = int(request.node.name.split("_")[1][1:])
    rec = Criterion(number, request.config.acceptance_lines)
    yield rec
    if not rec.done:
        rec.sink[number] = f"criterion {number:2d}  FAIL  {rec.title}: raised before its check"


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def bulk_rel(a, b, mask):
    return float(np.abs(a - b)[mask].max() / np.abs(b[mask]).max())


# ----------------------------------------------------------------- criterion 1

def test_c01_kernel_oracles(criterion):
    sources = np.linspace(-1.35, 1.35, 10)
    sinks = np.linspace(-0.9, 1.8, 10)
    grid = Grid.line(-8.0, 8.0, 1599)  # h = 0.01, every point on a node
    X, Y = np.meshgrid(sources, sinks, indexing="ij")
    worst = {}
    for name, spec in (("free", PotentialSpec.free()), ("harmonic", PotentialSpec.harmonic())):
        for T in (0.5, 1.0, 2.0):
            exact = (oracles.free_kernel((Y - X) ** 2, T) if name == "free"
                     else oracles.mehler_kernel(X, Y, T))
            for backend in ("spectral", "stepping"):
                G = F.reference_table(spec, grid, BoundarySet(sources, sinks, T), backend=backend).G
                key = f"{name}/{backend}"
                worst[key] = max(worst.get(key, 0.0), float(np.abs(G / exact - 1).max()))
    top = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion.check(top < 1e-3, f"max rel err {detail} (limit 1e-3)")


# ----------------------------------------------------------------- criterion 2

def test_c02_isotonic_ground_energy(criterion):
    spec = PotentialSpec.isotonic(v2=0.5, v_m2=5.0)
    data = eigensolve(discretize_hamiltonian(spec, Grid.line(0.0, 9.0, 5999)), 4)
    E0 = float(data.energies[0])
    closed = float(oracles.isotonic_energies(0))
    levels = float(np.abs(data.energies - oracles.isotonic_energies(np.arange(4))).max())
    ok = abs(E0 - 4.2016) < 1e-3 and abs(E0 - closed) < 1e-3
    criterion.check(ok, f"E0 = {E0:.6f} (closed form {closed:.6f}; n<=3 max dev {levels:.1e})")


# ----------------------------------------------------------------- criterion 3

def test_c03_harmonic_fit_exactness(criterion):
    pts = np.linspace(-1.2, 1.2, 9)
    spec = PotentialSpec.harmonic()
    grid = F.aligned_grid(pts, 0.01, -10.0, 10.0)
    start = ActionParams(1.2, {"v2": 0.4})  # deliberately off
    rows = []
    for T in (0.5, 1.0, 2.0, 5.0):
        table = F.reference_table(spec, grid, BoundarySet(pts, pts, T))
        r = F.fit(F.FitProblem(table, ("v2",), start))
        rows.append((T, abs(r.params.mass - 1.0), abs(r.params.coefficient("v2") / 0.5 - 1), r.sigma))
    dm = max(r[1] for r in rows)
    dv = max(r[2] for r in rows)
    sig = max(r[3] for r in rows)
    ok = dm < 1e-3 and dv < 1e-3 and sig < 1e-4
    criterion.check(ok, f"max |dm|/m {dm:.1e}, |dv2|/v2 {dv:.1e}, Sigma {sig:.1e}")


# ------------------------------------------------------------ criteria 4 and 5

def isotonic_scan(v_m2):
    spec = PotentialSpec.isotonic(v2=0.5, v_m2=v_m2)
    pts = F.default_points_1d()
    grid = F.aligned_grid(pts, 8.0 / 1201, 0.0, 8.0, fixed_lower=True)
    initial = ActionParams(1.0, {"v-2": v_m2, "v2": 0.5})
    first = F.reference_table(spec, grid, BoundarySet(pts, pts, ISO_TIMES[0]))
    template = F.FitProblem(first, ISO_ANSATZ, initial)
    cache = {ISO_TIMES[0]: first}
    return F.scan_T(template, ISO_TIMES, lambda t: cache.pop(t, None)
                    or F.reference_table(spec, grid, BoundarySet(pts, pts, t)))


@pytest.fixture(scope="module")
def isotonic_scans():
    out = {}
    for v in (5.0, 1.0):
        out[v] = timed(isotonic_scan, v)
    return out


@pytest.mark.slow
def test_c04_isotonic_error_profile(criterion, isotonic_scans):
    scan, seconds = isotonic_scans[5.0]
    complete = scan.times == ISO_TIMES
    sig = scan.sigmas()
    at_one = float(sig[list(scan.times).index(1.0)]) if 1.0 in scan.times else np.inf
    peak = int(np.argmax(sig))
    unimodal = bool(np.all(np.diff(sig[:peak + 1]) > 0) and np.all(np.diff(sig[peak:]) < 0))
    ends = max(sig[0], sig[-1]) / sig[peak]
    ok = complete and at_one <= 5e-3 and unimodal and ends < 0.25
    profile = " ".join(f"{s:.1e}" for s in sig)
    criterion.check(ok, f"Sigma(T=1) {at_one:.1e} (limit 5e-3); single peak {unimodal} at "
                        f"T={scan.times[peak]}; ends/peak {ends:.2f} (limit 0.25); profile [{profile}]",
                    seconds)


@pytest.mark.slow
def test_c05_asymptotic_products(criterion, isotonic_scans):
    rows, worst_fit, worst_ric, seconds = [], 0.0, 0.0, 0.0
    for v_m2, (scan, sec) in isotonic_scans.items():
        seconds += sec
        lam = oracles.isotonic_lambda(v_m2)
        target = lam**2 / 2
        late = [i for i, t in enumerate(scan.times) if t >= 5.0]
        if len(late) < 2:
            worst_fit = np.inf
        for i in late:
            p = scan.results[i].params.products()
            worst_fit = max(worst_fit, abs(p["v-2"] / target - 1), abs(p["v2"] / 0.5 - 1))
        spec = PotentialSpec.isotonic(v2=0.5, v_m2=v_m2)
        data = eigensolve(discretize_hamiltonian(spec, Grid.line(0.0, 9.0, 5999)), 1)
        prof = S.quantum_potential_from_ground_state(data.ground, float(data.energies[0]), 1.0,
                                                     ("v-2", "v2"))
        q = prof.products()
        worst_ric = max(worst_ric, abs(q["v-2"] / target - 1), abs(q["v2"] / 0.5 - 1))
        p8 = scan.results[-1].params.products()
        rows.append(f"v-2={v_m2:g}: target {target:.4f}, fit {p8['v-2']:.4f}, Riccati {q['v-2']:.4f}")
    ok = worst_fit < 0.02 and worst_ric < 1e-3
    criterion.check(ok, f"{'; '.join(rows)}; worst fit dev {worst_fit:.1e} (limit 2e-2), "
                        f"worst Riccati dev {worst_ric:.1e} (limit 1e-3)", seconds)


# ----------------------------------------------------------------- criterion 6

def test_c06_structure_round_trips(criterion):
    lam = oracles.isotonic_lambda(5.0)
    cases = (  # spec, grid, exact profile (coefficients, offset, ground energy)
        (PotentialSpec.isotonic(), Grid.line(0.0, 9.0, 5999),
         ({"v-2": lam**2, "v2": 1.0}, -2 * lam, float(oracles.isotonic_energies(0)))),
        (PotentialSpec.harmonic(), Grid.line(-8.0, 8.0, 3199), ({"v2": 1.0}, 0.0, 0.5)),
    )
    worst = dict(V=0.0, Q=0.0, law=0.0, ric=0.0)
    for spec, grid, (coeffs, offset, E_exact) in cases:
        data = eigensolve(discretize_hamiltonian(spec, grid), 2)
        psi, E = data.ground, float(data.energies[0])
        V = spec(grid.x)
        bulk = S.bulk_mask(psi)
        Vrec = S.reconstruct_classical_potential(psi, E, spec.mass, spec.hbar)
        worst["V"] = max(worst["V"], bulk_rel(Vrec.values, V, bulk & Vrec.valid))

        prof = S.quantum_potential_from_ground_state(psi, E)
        psi2 = S.ground_state_from_quantum_potential(prof)
        Q2 = S.quantum_potential_from_ground_state(psi2, E).Q.values
        worst["Q"] = max(worst["Q"], bulk_rel(Q2, prof.Q.values, bulk))

        exact = S.QuantumPotentialProfile.from_coefficients(grid, coeffs, offset, E_exact)
        law = S.transform_law_residual(spec, exact, E_exact)
        scale = np.abs(2 * spec.mass * (V - E_exact))[law.valid].max()
        worst["law"] = max(worst["law"], float(np.abs(law.values[law.valid]).max() / scale))

        worst["ric"] = max(worst["ric"], S.riccati_residual(psi, spec, E).max_ratio)
    ok = worst["V"] < 1e-2 and worst["Q"] < 1e-3 and worst["law"] < 1e-3 and worst["ric"] <= 10
    criterion.check(ok, f"V {worst['V']:.1e} (1e-2), Q {worst['Q']:.1e} (1e-3), transform law "
                        f"{worst['law']:.1e} (1e-3), Riccati/estimate {worst['ric']:.2f} (10)")


# ----------------------------------------------------------------- criterion 7

def test_c07_susy(criterion):
    cases = (
        ("oscillator", PotentialSpec.harmonic(), Grid.line(-8.0, 8.0, 1599)),
        ("isotonic", PotentialSpec.isotonic(), Grid.line(0.0, 9.0, 5999)),
    )
    parts, ok = [], True
    for name, spec, grid in cases:
        V = GridFunction(grid, S.to_susy_units(spec(grid.x), spec.mass, spec.hbar))
        pair = S.susy_partner(V)
        em, ep = S.partner_spectra(pair, 6)
        dev = float(np.abs(ep[:5] - em[1:6]).max())
        prof = S.quantum_potential_from_ground_state(pair.psi_gr, pair.shift, 1.0, (), S.SUSY_MASS)
        eq = S.susy_quantum_equivalence(pair, prof)
        ok = ok and dev < 1e-3 and eq.max_abs < 1e-6
        parts.append(f"{name}: spectra {dev:.1e}, |W^2 - Q| {eq.max_abs:.1e}")
    criterion.check(ok, "; ".join(parts) + " (limits 1e-3, 1e-6)")


# ----------------------------------------------------------------- criterion 8

@pytest.mark.slow
def test_c08_integrable_baseline(criterion):
    baseline = C.System(PotentialSpec({"v2": 0.5}, dim=2))
    seed, n, horizon = 20240601, 200, 2000.0
    parts, ok = [], True
    for E in (10.0, 80.0):
        dt = C.default_dt(baseline, E, 5e-3)
        thr = C.calibrate_threshold(baseline, E, n, horizon, seed, 1, dt)
        res = C.chaotic_fraction(baseline, E, n, thr, horizon, seed, 0, dt)
        kept = [o for o, k in zip(res.orbits, res.accepted) if k]
        l1 = max(o.l1 for o in kept)
        drift = max(o.energy_drift for o in kept)
        total = max(abs(o.exponents.sum()) for o in kept)
        pair = max(max(abs(v) for v in o.pairing()) for o in kept)
        good = (res.samples == n and res.chaotic == 0 and res.fraction == 0.0 and l1 < 1e-3
                and drift <= 1e-6 and total <= 1e-2 and pair <= 1e-2)
        ok = ok and good
        parts.append(f"E={E:g}: fraction {res.fraction:g} ({res.samples} kept), max l1 {l1:.1e}, "
                     f"drift {drift:.1e}, sum {total:.1e}, pairing {pair:.1e}")
    criterion.check(ok, "; ".join(parts))


# ------------------------------------------------------------ criteria 9 and 10

@pytest.fixture(scope="module")
def coupled():
    cfg = load_config(ROOT / "configs" / "coupled_chaos.toml", "chaos")
    spec = cli.build_spec(cfg)
    (scan, _, pts), seconds = timed(cli._fit_scan, cfg, spec)
    return cfg, spec, scan, pts, seconds


@pytest.mark.slow
def test_c10_spurious_couplings(criterion, coupled):
    cfg, _, scan, pts, seconds = coupled
    scale = float(np.sqrt((pts**2).sum(axis=1)).max())
    worst, where = 0.0, None
    for t, r in zip(scan.times, scan.results):
        ratios = F.magnitude_ratios(r.params, scale)
        for name in SPURIOUS_2D:
            if ratios[name] > worst:
                worst, where = ratios[name], (t, name)
    complete = len(scan.times) == len(cfg["transition"]["T"])
    ok = complete and worst < 0.05
    criterion.check(ok, f"largest spurious ratio {worst:.2%} ({where[1]} at T={where[0]:g}) "
                        f"over T={list(scan.times)} (limit 5%)", seconds)


@pytest.mark.slow
def test_c09_chaotic_fractions(criterion, coupled):
    cfg, spec, scan, _, seconds = coupled
    ch = cfg["chaos"]
    seed, n, horizon = cfg.seed, ch["samples"], ch["horizon"]
    last, prev = scan.results[-1].params.products(), scan.results[-2].params.products()
    moving = max(abs(last[k] - prev[k]) for k in last) / max(abs(v) for v in last.values())
    classical = C.System(spec)
    quantum = C.System(scan.results[-1].params)
    baseline = C.System(cli._integrable_baseline(spec))
    energies = sorted(ch["energies"])
    dt = min(C.default_dt(s, energies[-1], 5e-3) for s in (classical, quantum))
    rows = []
    for E in energies:
        thr = C.calibrate_threshold(baseline, E, ch["baseline_samples"], horizon, seed, 1, dt)
        rows.append((E, C.chaotic_fraction(classical, E, n, thr, horizon, seed, 0, dt),
                     C.chaotic_fraction(quantum, E, n, thr, horizon, seed, 0, dt)))
    fc = np.array([c.fraction for _, c, _ in rows])
    sc = np.array([c.binomial_error for _, c, _ in rows])
    fq = np.array([q.fraction for _, _, q in rows])
    sq = np.array([q.binomial_error for _, _, q in rows])
    # n counts drawn samples; discards must stay within the 10% budget
    enough = n >= 200 and not any(c.flagged or q.flagged for _, c, q in rows)
    positive = bool(np.all(fc > 0))
    # one combined binomial standard deviation, fixed before looking at data
    rising = bool(np.all(np.diff(fc) >= -np.sqrt(sc[1:] ** 2 + sc[:-1] ** 2)))
    below = bool(np.all(fq <= fc + np.sqrt(sc**2 + sq**2)))
    table = ", ".join(f"E={E:g}: {c.fraction:.3f}+-{c.binomial_error:.3f} ({c.discarded} dropped)"
                      f" / {q.fraction:.3f}+-{q.binomial_error:.3f} ({q.discarded} dropped)"
                      for E, c, q in rows)
    ok = enough and positive and rising and below and moving <= 0.01
    criterion.check(ok, f"classical/quantum {table}; positive {positive}, non-decreasing {rising}, "
                        f"quantum <= classical {below}, n={n} within discard budget {enough}, "
                        f"fit drift between last two T {moving:.2%}", seconds)


# ---------------------------------------------------------------- criterion 11

SPECTRUM_TOML = """
[run]
seed = 7
[potential]
terms = { v2 = 0.5, "v-2" = 5.0 }
[grid]
lower = 0.0
upper = 9.0
n = 1799
[spectrum]
states = 6
wavefunctions = true
"""

FIT_TOML = """
[potential]
terms = { v2 = 0.5 }
[grid]
lower = -8.0
upper = 8.0
n = 799
[transition]
T = [0.5, 1.0, 2.0]
range = [-1.0, 1.0, 5]
[fit]
ansatz = ["v2"]
residuals = true
"""

CHAOS_TOML = """
[run]
seed = 123456789
[potential]
dim = 2
terms = { v2 = 0.5, v22 = 0.05 }
[chaos]
energies = [5.0, 10.0]
samples = 8
baseline_samples = 8
horizon = 2000.0
section_orbits = 2
section_time = 60.0
quantum = "explicit"
quantum_mass = 1.0
quantum_terms = { v2 = 0.51, v22 = 0.045 }
"""


def test_c11_determinism(criterion, tmp_path):
    runs = {"spectrum": SPECTRUM_TOML, "fit": FIT_TOML, "chaos": CHAOS_TOML}
    compared, mismatched, codes = 0, [], {}
    for command, text in runs.items():
        cfg = tmp_path / f"{command}.toml"
        cfg.write_text(text)
        dirs = []
        for k, threads in enumerate((1, 1, 3)):
            out = tmp_path / f"{command}-{k}"
            codes.setdefault(command, set()).add(
                cli.main([command, "--config", str(cfg), "--out", str(out), "--threads", str(threads)]))
            dirs.append(out)
        names = sorted(p.name for p in dirs[0].glob("*.csv"))
        for other in dirs[1:]:
            if sorted(p.name for p in other.glob("*.csv")) != names:
                mismatched.append(f"{other.name}: file set")
            for name in names:
                compared += 1
                if not filecmp.cmp(dirs[0] / name, other / name, shallow=False):
                    mismatched.append(f"{other.name}/{name}")
    ok = not mismatched and compared >= 10 and all(c == {0} for c in codes.values())
    criterion.check(ok, f"{compared} CSV comparisons over three reruns per command "
                        f"(threads 1, 1, 3), exit codes {dict((k, sorted(v)) for k, v in codes.items())}, "
                        f"mismatches {mismatched or 'none'}")
