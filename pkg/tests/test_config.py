import pytest

from qact.config import load_config, parse_config
from qact.errors import ConfigError

BASE = """
[potential]
terms = { v2 = 0.5 }

[grid]
lower = -5
upper = 5
n = 200
"""


def test_defaults_and_coercion():
    cfg = parse_config(BASE, "spectrum")
    assert cfg["grid"]["lower"] == -5.0 and isinstance(cfg["grid"]["lower"], float)
    assert cfg["potential"]["mass"] == 1.0 and cfg.seed == 0
    assert cfg.get("spectrum") is None
    assert set(cfg.resolved()) == {"grid", "potential", "run"}


@pytest.mark.parametrize("text,command,fragment", [
    (BASE + "[bogus]\nx = 1\n", "spectrum", "unknown section"),
    (BASE.replace("n = 200", "n = 200\nnn = 3"), "spectrum", "unknown key"),
    (BASE.replace("n = 200", ""), "spectrum", "missing required key 'n'"),
    (BASE.replace("n = 200", 'n = "200"'), "spectrum", "expected int"),
    (BASE.replace("n = 200", "n = true"), "spectrum", "boolean"),
    (BASE.replace("upper = 5", "upper = -6"), "spectrum", "upper must exceed"),
    (BASE, "fit", "needs section(s): transition, fit"),
    ("[potential]\nterms = { v2 = 0.5 }\n", "spectrum", "needs section(s): grid"),
    (BASE + "[potential2", "spectrum", "<string>"),
    (BASE.replace("{ v2 = 0.5 }", '{ v2 = "a" }'), "spectrum", "numeric coefficient"),
    (BASE + "[transition]\nT = []\n", "amplitudes", "non-empty"),
    (BASE + "[transition]\nT = [1.0]\n[amplitudes]\nbackends = ['exact']\n", "amplitudes", "backends"),
    (BASE + "[chaos]\nenergies = [1.0]\nquantum = 'explicit'\n", "chaos", "quantum_terms"),
    (BASE + "[chaos]\nenergies = [1.0]\nquantum = 'none'\n", "chaos", "2D"),
    (BASE + "[structure]\nansatz = []\nperturb = 0.0\n", "structure", "perturb"),
])
def test_rejections(text, command, fragment):
    with pytest.raises(ConfigError, match=None) as exc:
        parse_config(text, command)
    assert fragment in str(exc.value)


def test_unknown_command_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(BASE, "plot")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml", "spectrum")
