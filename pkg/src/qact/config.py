"""Run configuration: TOML files validated against a fixed schema.

Every section and key is declared in ``SCHEMA``; anything else is rejected so
that typos in scientific runs fail loudly instead of silently using defaults.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .errors import ConfigError

_REQUIRED = object()

# section -> key -> (accepted types, default)
SCHEMA: dict[str, dict[str, tuple[tuple[type, ...], Any]]] = {
    "run": {
        "seed": ((int,), 0),
        "out": ((str,), "qact-out"),
    },
    "potential": {
        "dim": ((int,), 1),
        "mass": ((int, float), 1.0),
        "hbar": ((int, float), 1.0),
        "terms": ((dict,), _REQUIRED),
    },
    "grid": {
        "lower": ((int, float), _REQUIRED),
        "upper": ((int, float), _REQUIRED),
        "n": ((int,), _REQUIRED),
    },
    "spectrum": {
        "states": ((int,), 10),
        "wavefunctions": ((bool,), False),
    },
    "transition": {
        "T": ((list,), _REQUIRED),
        "points": ((list,), []),
        "range": ((list,), []),
        "ring_radius": ((int, float), 1.5),
        "ring_count": ((int,), 16),
        "inner": ((int, float), 0.5),
    },
    "amplitudes": {
        "backends": ((list,), ["spectral", "stepping"]),
        "tolerance": ((int, float), 1e-2),
        "oracle": ((str,), "none"),
    },
    "fit": {
        "ansatz": ((list,), _REQUIRED),
        "backend": ((str,), "spectral"),
        "max_iter": ((int,), 200),
        "tol": ((int, float), 1e-9),
        "simplex_evals": ((int,), 150),
        "richardson": ((bool,), True),
        "order": ((int,), 1),
        "residuals": ((bool,), False),
    },
    "structure": {
        "ansatz": ((list,), _REQUIRED),
        "perturb": ((int, float), 1.0),
    },
    "chaos": {
        "energies": ((list,), _REQUIRED),
        "samples": ((int,), 200),
        "horizon": ((int, float), 2000.0),
        "dt": ((int, float), 0.0),
        "baseline_samples": ((int,), 200),
        "section_orbits": ((int,), 6),
        "section_time": ((int, float), 500.0),
        "section_energy": ((int, float), 0.0),
        "quantum": ((str,), "fit"),
        "quantum_mass": ((int, float), 1.0),
        "quantum_terms": ((dict,), {}),
    },
}

NEEDS = {
    "spectrum": ("potential", "grid"),
    "amplitudes": ("potential", "grid", "transition"),
    "fit": ("potential", "grid", "transition", "fit"),
    "structure": ("potential", "grid", "structure"),
    "chaos": ("potential", "chaos"),
}


@dataclass(frozen=True)
class RunConfig:
    command: str
    sections: dict[str, dict[str, Any]]
    source: str

    def __getitem__(self, name: str) -> dict[str, Any]:
        return self.sections[name]

    def get(self, name: str) -> dict[str, Any] | None:
        return self.sections.get(name)

    @property
    def seed(self) -> int:
        return self.sections["run"]["seed"]

    def resolved(self) -> dict[str, Any]:
        """Plain nested dict of every section with defaults filled in."""
        return {k: dict(v) for k, v in sorted(self.sections.items())}


def _check_value(section: str, key: str, value, types) -> Any:
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"[{section}] {key}: expected {types[0].__name__}, got a boolean")
    if not isinstance(value, types):
        raise ConfigError(f"[{section}] {key}: expected {' or '.join(t.__name__ for t in types)}")
    if float in types and isinstance(value, int):
        return float(value)
    return value


def parse_config(text: str, command: str, source: str = "<string>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if command not in NEEDS:
        raise ConfigError(f"unknown subcommand {command!r}")
    unknown = set(raw) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    missing = [s for s in NEEDS[command] if s not in raw]
    if missing:
        raise ConfigError(f"'{command}' needs section(s): {', '.join(missing)}")
    sections: dict[str, dict[str, Any]] = {}
    for name, keys in SCHEMA.items():
        if name not in raw and name != "run":
            continue
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{name}] must be a table")
        extra = set(given) - set(keys)
        if extra:
            raise ConfigError(f"[{name}] unknown key(s): {', '.join(sorted(extra))}")
        out = {}
        for key, (types, default) in keys.items():
            if key in given:
                out[key] = _check_value(name, key, given[key], types)
            elif default is _REQUIRED:
                raise ConfigError(f"[{name}] missing required key '{key}'")
            else:
                out[key] = default
        sections[name] = out
    _validate(sections)
    return RunConfig(command, sections, source)


def _validate(sec: dict[str, dict[str, Any]]) -> None:
    pot = sec.get("potential")
    if pot is not None:
        if pot["dim"] not in (1, 2):
            raise ConfigError("[potential] dim must be 1 or 2")
        if pot["mass"] <= 0 or pot["hbar"] <= 0:
            raise ConfigError("[potential] mass and hbar must be positive")
        for k, v in pot["terms"].items():
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"[potential] term {k!r} needs a numeric coefficient")
    grid = sec.get("grid")
    if grid is not None:
        if not grid["upper"] > grid["lower"]:
            raise ConfigError("[grid] upper must exceed lower")
        if grid["n"] < 3:
            raise ConfigError("[grid] n must be at least 3")
    tr = sec.get("transition")
    if tr is not None:
        if not tr["T"] or any(isinstance(t, bool) or not isinstance(t, (int, float)) or t <= 0
                              for t in tr["T"]):
            raise ConfigError("[transition] T must be a non-empty list of positive numbers")
        if tr["range"] and len(tr["range"]) != 3:
            raise ConfigError("[transition] range is [lower, upper, count]")
    amp = sec.get("amplitudes")
    if amp is not None:
        bad = set(amp["backends"]) - {"spectral", "stepping"}
        if bad or not amp["backends"]:
            raise ConfigError("[amplitudes] backends must be drawn from 'spectral', 'stepping'")
        if amp["oracle"] not in ("none", "free", "harmonic"):
            raise ConfigError("[amplitudes] oracle must be 'none', 'free' or 'harmonic'")
    fit = sec.get("fit")
    if fit is not None:
        if fit["backend"] not in ("spectral", "stepping"):
            raise ConfigError("[fit] backend must be 'spectral' or 'stepping'")
        if fit["order"] not in (1, 3):
            raise ConfigError("[fit] order must be 1 or 3")
    st = sec.get("structure")
    if st is not None and not st["perturb"] > 0:
        raise ConfigError("[structure] perturb must be positive")
    chaos = sec.get("chaos")
    if chaos is not None:
        if chaos["quantum"] not in ("fit", "explicit", "none"):
            raise ConfigError("[chaos] quantum must be 'fit', 'explicit' or 'none'")
        if chaos["quantum"] == "explicit" and not chaos["quantum_terms"]:
            raise ConfigError("[chaos] quantum = 'explicit' needs quantum_terms")
        if chaos["quantum"] == "fit" and not {"grid", "transition", "fit"} <= set(sec):
            raise ConfigError("[chaos] quantum = 'fit' needs [grid], [transition] and [fit]")
        if chaos["samples"] < 1 or chaos["horizon"] <= 0:
            raise ConfigError("[chaos] samples and horizon must be positive")
        if pot is not None and pot["dim"] != 2:
            raise ConfigError("[chaos] needs a 2D potential")


def load_config(path: str | Path, command: str) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, command, str(p))
