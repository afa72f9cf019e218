"""Experiment configuration: sectioned key = value text, parsed strictly."""
from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .spectral import RESOLUTION_GUARD

MODEL_NAMES = ("sphere-tangent", "torus-flat", "torus-curved")
EXPERIMENTS = ("euler-density", "zero-stats", "reconstruct-sweep", "pfaffian-selftest")
FUNCTION_NAMES = ("one", "x3", "x3sq", "custom-fourier")
PROFILES = ("bump", "gaussian")
FAMILIES = ("default", "fourier", "mixed")


class ConfigError(ValueError):
    def __init__(self, msg, line=None, key=None, source="<config>"):
        self.msg = msg
        self.line = line
        self.key = key
        self.source = source
        where = source + (f":{line}" if line else "")
        super().__init__(f"{where}: {key + ': ' if key else ''}{msg}")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: str = "sphere-tangent"
    seed: int = 0
    out: str = ""
    family: str = "default"
    amplitude: Optional[float] = None
    n: int = 1000
    seed_grid: int = 32
    test_functions: tuple = ("one",)
    fourier_c0: float = 0.0
    fourier_terms: tuple = ()
    quadrature: tuple = ()
    lattice: int = 48
    eps: tuple = ()
    eps_count: int = 4
    profile: str = "bump"
    width: float = 4.0
    profile_amplitude: float = 1.0
    trials: int = 200
    mc_draws: int = 1_000_000
    arrays: int = 20

    def model_params(self) -> dict:
        return {"amplitude": self.amplitude} if self.model == "torus-curved" else {}

    def eps_list(self):
        if self.eps:
            return list(self.eps)
        h = 2 * math.pi / self.lattice
        return [RESOLUTION_GUARD * h * 2.0 ** k for k in range(self.eps_count - 1, -1, -1)]

    def quadrature_sizes(self):
        if self.quadrature:
            return tuple(self.quadrature)
        return (64, 128) if self.model == "sphere-tangent" else (48,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["test_functions"] = list(self.test_functions)
        d["fourier_terms"] = [list(t) for t in self.fourier_terms]
        d["quadrature"] = list(self.quadrature)
        d["eps"] = list(self.eps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["test_functions"] = tuple(d.get("test_functions", ("one",)))
        d["fourier_terms"] = tuple(tuple(t) for t in d.get("fourier_terms", ()))
        d["quadrature"] = tuple(d.get("quadrature", ()))
        d["eps"] = tuple(d.get("eps", ()))
        return cls(**d)

    def to_text(self) -> str:
        """Canonical config text; parse_config_text(cfg.to_text()) == cfg."""
        out = ["[run]",
               f"experiment = {self.experiment}",
               f"model = {self.model}",
               f"seed = {self.seed}"]
        if self.out:
            out.append(f"out = {self.out}")
        out += ["", "[model]", f"family = {self.family}"]
        if self.amplitude is not None:
            out.append(f"amplitude = {self.amplitude!r}")
        out += ["", "[samples]",
                f"n = {self.n}",
                f"seed_grid = {self.seed_grid}",
                f"test_functions = {', '.join(self.test_functions)}",
                "", "[custom-fourier]",
                f"c0 = {self.fourier_c0!r}",
                "terms = " + "; ".join(f"{k1} {k2} {a!r} {b!r}" for k1, k2, a, b in self.fourier_terms),
                "", "[grid]",
                "quadrature = " + ", ".join(str(q) for q in self.quadrature),
                f"lattice = {self.lattice}",
                "", "[sweep]",
                "eps = " + (", ".join(repr(e) for e in self.eps) if self.eps else "dyadic"),
                f"eps_count = {self.eps_count}",
                f"profile = {self.profile}",
                f"width = {self.width!r}",
                f"profile_amplitude = {self.profile_amplitude!r}",
                "", "[selftest]",
                f"trials = {self.trials}",
                f"mc_draws = {self.mc_draws}",
                f"arrays = {self.arrays}", ""]
        return "\n".join(out)


# section -> key -> (field name, kind)
_SCHEMA = {
    "run": {"experiment": ("experiment", "str"), "model": ("model", "str"),
            "seed": ("seed", "seed"), "out": ("out", "raw")},
    "model": {"family": ("family", "str"), "amplitude": ("amplitude", "float")},
    "samples": {"n": ("n", "int"), "seed_grid": ("seed_grid", "int"),
                "test_functions": ("test_functions", "names"), "test_function": ("test_functions", "names")},
    "custom-fourier": {"c0": ("fourier_c0", "real"), "terms": ("fourier_terms", "terms")},
    "grid": {"quadrature": ("quadrature", "ints"), "lattice": ("lattice", "int")},
    "sweep": {"eps": ("eps", "eps"), "eps_count": ("eps_count", "int"), "profile": ("profile", "str"),
              "width": ("width", "float"), "profile_amplitude": ("profile_amplitude", "float")},
    "selftest": {"trials": ("trials", "int"), "mc_draws": ("mc_draws", "int"), "arrays": ("arrays", "int")},
}


def _key_lines(text):
    lines = {}
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            lines.setdefault((section, None), no)
        elif "=" in s and not s.startswith("#") and section is not None:
            lines.setdefault((section, s.split("=", 1)[0].strip().lower()), no)
    return lines


def _convert(kind, value):
    v = value.strip()
    if kind in ("str", "raw"):
        if not v:
            raise ValueError("empty value")
        return v
    if kind in ("int", "seed"):
        x = int(v, 0)
        if kind == "seed":
            if not 0 <= x < 2**64:
                raise ValueError("seed must be a 64-bit unsigned integer")
        elif x <= 0:
            raise ValueError("must be a positive integer")
        return x
    if kind in ("float", "real"):
        x = float(v)
        if not math.isfinite(x):
            raise ValueError("must be finite")
        if kind == "float" and x <= 0:
            raise ValueError("must be positive")
        return x
    if kind == "names":
        names = tuple(s.strip() for s in v.split(",") if s.strip())
        if not names:
            raise ValueError("empty list")
        return names
    if kind == "ints":
        if not v:
            return ()
        xs = tuple(int(s) for s in v.split(","))
        if any(x <= 0 for x in xs):
            raise ValueError("grid sizes must be positive")
        return xs
    if kind == "eps":
        if v.lower() == "dyadic" or not v:
            return ()
        xs = tuple(float(s) for s in v.split(","))
        if any(not (x > 0 and math.isfinite(x)) for x in xs):
            raise ValueError("eps entries must be positive")
        return xs
    if kind == "terms":
        out = []
        for part in v.split(";"):
            if not part.strip():
                continue
            tok = part.split()
            if len(tok) != 4:
                raise ValueError("each term is 'k1 k2 a b'")
            out.append((int(tok[0]), int(tok[1]), float(tok[2]), float(tok[3])))
        return tuple(out)
    raise AssertionError(kind)


def parse_config_text(text: str, source="<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                   strict=True, empty_lines_in_values=False)
    cp.optionxform = str.lower
    try:
        cp.read_string(text, source=source)
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key in [{e.section}]", e.lineno, e.option, source) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", e.lineno, None, source) from None
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("assignment before any [section] header", e.lineno, None, source) from None
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError("malformed line (expected 'key = value')", line, None, source) from None
    lines = _key_lines(text)
    vals = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]", lines.get((section, None)), None, source)
        for key, value in cp.items(section):
            line = lines.get((section, key))
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key in [{section}]", line, key, source)
            name, kind = _SCHEMA[section][key]
            try:
                vals[name] = _convert(kind, value)
            except ValueError as e:
                raise ConfigError(f"bad value {value.strip()!r} ({e})", line, f"[{section}] {key}", source) from None
            vals.setdefault("_lines", {})[name] = (line, f"[{section}] {key}")
    where = vals.pop("_lines", {})

    def fail(name, msg):
        line, key = where.get(name, (None, name))
        raise ConfigError(msg, line, key, source)

    if "experiment" not in vals:
        raise ConfigError("missing required key", lines.get(("run", None)), "[run] experiment", source)
    if vals["experiment"] not in EXPERIMENTS:
        fail("experiment", f"unknown experiment {vals['experiment']!r}; choose from {', '.join(EXPERIMENTS)}")
    model = vals.get("model", "sphere-tangent")
    if model not in MODEL_NAMES:
        fail("model", f"unknown model {model!r}; choose from {', '.join(MODEL_NAMES)}")
    if vals.get("family", "default") not in FAMILIES:
        fail("family", f"unknown family {vals['family']!r}; choose from {', '.join(FAMILIES)}")
    if model == "sphere-tangent" and vals.get("family", "default") != "default":
        fail("family", "the sphere model has a single family")
    if "amplitude" in vals and model != "torus-curved":
        fail("amplitude", "only torus-curved takes a connection amplitude")
    if model == "torus-curved":
        vals.setdefault("amplitude", 0.25)
    for f in vals.get("test_functions", ()):
        if f not in FUNCTION_NAMES:
            fail("test_functions", f"unknown test function {f!r}; choose from {', '.join(FUNCTION_NAMES)}")
    if vals.get("fourier_terms") and "custom-fourier" not in vals.get("test_functions", ()):
        fail("fourier_terms", "terms given but custom-fourier is not among the test functions")
    if vals.get("profile", "bump") not in PROFILES:
        fail("profile", f"unknown profile {vals['profile']!r}; choose from {', '.join(PROFILES)}")
    q = vals.get("quadrature", ())
    if q:
        want = 2 if model == "sphere-tangent" else 1
        if len(q) != want:
            fail("quadrature", f"{model} takes {want} quadrature size(s)")
    if vals.get("eps_count", 4) < 3:
        fail("eps_count", "a slope fit needs at least 3 eps values")
    lattice = vals.get("lattice", 48)
    if lattice < 8:
        fail("lattice", "lattice must have at least 8 nodes per side")
    h = 2 * math.pi / lattice
    for e in vals.get("eps", ()):
        if e < RESOLUTION_GUARD * h * (1 - 1e-12):
            fail("eps", f"eps = {e!r} is below the resolution guard 8h = {RESOLUTION_GUARD * h:.6g}")
    if vals["experiment"] == "reconstruct-sweep" and model == "sphere-tangent":
        fail("model", "reconstruct-sweep runs on the torus models only")
    if vals["experiment"] == "zero-stats" and vals.get("n", 1000) < 100:
        fail("n", "zero-stats needs at least 100 samples")
    return ExperimentConfig(**vals)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config ({e.strerror})", source=str(path)) from None
    except UnicodeDecodeError:
        raise ConfigError("config is not valid UTF-8", source=str(path)) from None
    return parse_config_text(text, source=str(path))


CONFIG_FIELDS = tuple(f.name for f in fields(ExperimentConfig))
