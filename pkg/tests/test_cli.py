import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from qact.cli import main

import oracles


def run(tmp_path, command, text, *extra):
    cfg = tmp_path / f"{command}.toml"
    cfg.write_text(text)
    out = tmp_path / "out"
    code = main([command, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


HARMONIC = """
[potential]
terms = { v2 = 0.5 }
[grid]
lower = -10.0
upper = 10.0
n = 2001
"""

ISOTONIC = """
[potential]
terms = { v2 = 0.5, "v-2" = 5.0 }
[grid]
lower = 0.0
upper = 10.0
n = 4000
"""


def test_spectrum_harmonic(tmp_path):
    code, out = run(tmp_path, "spectrum", HARMONIC + "[spectrum]\nstates = 5\nwavefunctions = true\n")
    assert code == 0
    E = [float(r["E_n"]) for r in rows(out / "spectrum.csv")]
    np.testing.assert_allclose(E, np.arange(5) + 0.5, atol=1e-3)
    assert (out / "wavefunctions.csv").exists() and (out / "spectrum.gp").exists()
    info = json.loads((out / "run.json").read_text())
    assert info["version"] and info["config"]["grid"]["n"] == 2001


def test_spectrum_isotonic(tmp_path):
    code, out = run(tmp_path, "spectrum", ISOTONIC)
    assert code == 0
    assert float(rows(out / "spectrum.csv")[0]["E_n"]) == pytest.approx(4.2016, abs=1e-3)


def test_malformed_config_leaves_no_output(tmp_path):
    code, out = run(tmp_path, "spectrum", "[potential]\nterms = { v2 = 0.5 }\n")
    assert code == 1
    assert not out.exists()


def test_bad_seed_is_a_config_error(tmp_path):
    code, out = run(tmp_path, "spectrum", HARMONIC, "--seed", str(2**64))
    assert code == 1 and not out.exists()


AMPS = """
[transition]
T = [0.5, 1.0]
range = [-1.0, 1.0, 5]
[amplitudes]
oracle = "{oracle}"
"""


@pytest.mark.parametrize("oracle,terms", [("free", "{}"), ("harmonic", "{ v2 = 0.5 }")])
def test_amplitudes_against_closed_forms(tmp_path, oracle, terms):
    text = (HARMONIC.replace("{ v2 = 0.5 }", terms).replace("-10.0", "-16.0").replace("10.0", "16.0")
            .replace("2001", "3199") + AMPS.replace("{oracle}", oracle))
    code, out = run(tmp_path, "amplitudes", text)
    assert code == 0
    for r in rows(out / "agreement.csv"):
        assert float(r["max_rel_diff"]) < 1e-3, r
    amps = rows(out / "amplitudes.csv")
    assert {r["backend"] for r in amps} == {"spectral", "stepping"}
    r = next(r for r in amps if r["backend"] == "stepping" and float(r["T"]) == 1.0)
    a, b = float(r["x_in"]), float(r["x_fi"])
    ref = (oracles.free_kernel((a - b) ** 2, 1.0) if oracle == "free"
           else oracles.mehler_kernel(a, b, 1.0))
    assert float(r["G"]) == pytest.approx(ref, rel=1e-3)


def test_amplitudes_isotonic_backends_agree(tmp_path):
    text = ISOTONIC.replace("4000", "1599").replace("10.0", "8.0") + """
[transition]
T = [0.5, 2.0]
range = [0.8, 2.4, 5]
[amplitudes]
tolerance = 1e-3
"""
    code, out = run(tmp_path, "amplitudes", text)
    assert code == 0


def test_amplitudes_disagreement_exits_2(tmp_path):
    text = HARMONIC.replace("2001", "399") + AMPS.replace('oracle = "{oracle}"', "tolerance = 1e-14")
    code, out = run(tmp_path, "amplitudes", text)
    assert code == 2
    assert (out / "agreement.csv").exists()


def test_fit_harmonic_rows_are_flat(tmp_path):
    text = HARMONIC.replace("2001", "1599").replace("-10.0", "-8.0").replace("10.0", "8.0") + """
[transition]
T = [0.5, 1.0, 2.0]
range = [-1.0, 1.0, 9]
[fit]
ansatz = ["v2"]
residuals = true
"""
    code, out = run(tmp_path, "fit", text)
    assert code == 0
    for r in rows(out / "fit_scan.csv"):
        assert float(r["m_tilde"]) == pytest.approx(1.0, rel=1e-3)
        assert float(r["mv2"]) == pytest.approx(0.5, rel=1e-3)
        assert float(r["Sigma"]) < 1e-4 and r["converged"] == "1"
    assert (out / "residuals.csv").exists() and (out / "fit.gp").exists()


STRUCT = "[structure]\nansatz = [\"v-2\", \"v2\"]\n"


def test_structure_isotonic_passes(tmp_path):
    code, out = run(tmp_path, "structure", ISOTONIC.replace("4000", "6000") + STRUCT)
    assert code == 0
    checks = rows(out / "structure_checks.csv")
    assert len(checks) == 8 and all(c["pass"] == "1" for c in checks)
    assert (out / "susy.csv").exists() and (out / "structure.csv").exists()


def test_structure_oscillator_partner(tmp_path):
    text = HARMONIC.replace("2001", "3199").replace("-10.0", "-8.0").replace("10.0", "8.0")
    code, out = run(tmp_path, "structure", text + '[structure]\nansatz = ["v2"]\n')
    assert code == 0
    susy = rows(out / "susy.csv")
    # hbar = 2m = 1 units: V- = x^2 - 1 has levels 0, 2, 4, ...
    np.testing.assert_allclose([float(r["E_minus"]) for r in susy], 2 * np.arange(len(susy)), atol=2e-3)
    prof = rows(out / "structure.csv")
    mid = [r for r in prof if abs(float(r["x"])) < 2]
    for r in mid[::50]:
        x = float(r["x"])
        assert float(r["V_plus"]) == pytest.approx(x**2 + 1, abs=1e-3)


def test_structure_perturbed_profile_exits_3(tmp_path):
    text = ISOTONIC.replace("4000", "6000") + STRUCT + "perturb = 1.05\n"
    code, out = run(tmp_path, "structure", text)
    assert code == 3
    bad = [c["check"] for c in rows(out / "structure_checks.csv") if c["pass"] == "0"]
    assert bad == ["transform_law"]


def test_structure_rejects_2d(tmp_path):
    text = "[potential]\ndim = 2\nterms = { v2 = 0.5 }\n[grid]\nlower = -4.0\nupper = 4.0\nn = 40\n" + STRUCT
    code, _ = run(tmp_path, "structure", text)
    assert code == 1


CHAOS = """
[run]
seed = 123
[potential]
dim = 2
terms = {terms}
[chaos]
energies = [5.0, 10.0]
samples = 6
baseline_samples = 6
horizon = 100.0
section_orbits = 2
section_time = 40.0
quantum = "explicit"
quantum_terms = {{ v2 = 0.5 }}
"""


def test_chaos_integrable_fractions_are_zero(tmp_path):
    code, out = run(tmp_path, "chaos", CHAOS.format(terms="{ v2 = 0.5 }"))
    assert code == 0
    fr = rows(out / "fraction.csv")
    assert {r["system"] for r in fr} == {"classical", "quantum"}
    assert all(float(r["fraction"]) == 0.0 and r["seed"] == "123" for r in fr)
    assert {r["system"] for r in rows(out / "section.csv")} == {"classical", "quantum"}
    assert (out / "lyapunov.csv").exists() and (out / "chaos.gp").exists()


def test_chaos_outputs_are_deterministic(tmp_path):
    text = CHAOS.format(terms="{ v2 = 0.5, v22 = 0.3 }")
    first = tmp_path / "a"
    first.mkdir()
    second = tmp_path / "b"
    second.mkdir()
    c1, o1 = run(first, "chaos", text, "--threads", "1")
    c2, o2 = run(second, "chaos", text, "--threads", "3")
    assert c1 == c2
    for name in ("fraction.csv", "section.csv", "lyapunov.csv", "chaos.gp"):
        assert (o1 / name).read_bytes() == (o2 / name).read_bytes(), name


def test_seed_override_is_recorded(tmp_path):
    code, out = run(tmp_path, "chaos", CHAOS.format(terms="{ v2 = 0.5 }"), "--seed", "99")
    assert code == 0
    assert json.loads((out / "run.json").read_text())["seed"] == 99
    assert {r["seed"] for r in rows(out / "fraction.csv")} == {"99"}


def test_console_entry_point(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[potential]\nterms = { v2 = 0.5 }\n")
    proc = subprocess.run([sys.executable, "-m", "qact.cli", "spectrum", "--config", str(cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "configuration error" in proc.stderr
