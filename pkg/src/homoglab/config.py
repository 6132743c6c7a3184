"""Run configuration: a versioned YAML document with a fixed schema.

Grammar (version 1)::

    version: 1
    grid:
      d: 2                       # dimension of the fluctuation suites
      h: 0.5                     # lattice spacing, microscopic units
      eps: [0.125, 0.0625, 0.03125]
    ensemble:
      kernel: {radius: 1.0, power: 1}
      kappa: 1
      coefficient: {kind: clipped-sigmoid-isotropic, lam: 0.25, gain: 1.0}
      identity_maps: [clipped-sigmoid-isotropic, nonsymmetric-with-skew-part]
      seeds: {start: 0, count: 100}
      calibration_seeds: {start: 100000, count: 400}
      normality_seeds: 200
    suites: [identities, refinement, scaling, fluctuations, normality, sensitivity]
    tolerances: {solver: 1.0e-10}
    threads: 1
    output: results

Unknown keys are rejected with their line number. The hash of a
configuration is the SHA-256 of its normalised form serialised as JSON with
sorted keys, so it does not depend on key order in the file.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .gaussian_field import CoefficientMapSpec, ConfigError

SUITES = ("identities", "refinement", "scaling", "fluctuations", "normality", "sensitivity")
VERSION = 1

DEFAULTS = {
    "version": VERSION,
    "grid": {"d": 2, "h": 0.5, "eps": [0.125, 0.0625, 0.03125]},
    "ensemble": {
        "kernel": {"radius": 1.0, "power": 1},
        "kappa": 1,
        "coefficient": {"kind": "clipped-sigmoid-isotropic"},
        "identity_maps": ["clipped-sigmoid-isotropic", "nonsymmetric-with-skew-part"],
        "seeds": {"start": 0, "count": 100},
        "calibration_seeds": {"start": 100000, "count": 400},
        "normality_seeds": 200,
    },
    "suites": list(SUITES),
    "tolerances": {"solver": 1e-10},
    "threads": 1,
    "output": "results",
}

# leaf types; a dict value is a nested block
_SCHEMA = {
    "version": int,
    "grid": {"d": int, "h": float, "eps": list},
    "ensemble": {
        "kernel": {"radius": float, "power": int},
        "kappa": int,
        "coefficient": dict,
        "identity_maps": list,
        "seeds": {"start": int, "count": int},
        "calibration_seeds": {"start": int, "count": int},
        "normality_seeds": int,
    },
    "suites": list,
    "tolerances": {"solver": float},
    "threads": int,
    "output": str,
}


def _line_of(node, path) -> int | None:
    """1-based line of the key at ``path`` in a composed YAML node tree."""
    for key in path:
        if not isinstance(node, yaml.MappingNode):
            return None
        for k, v in node.value:
            if k.value == key:
                node = v
                line = k.start_mark.line + 1
                break
        else:
            return None
    return line if path else None


def _where(root, path) -> str:
    line = _line_of(root, path) if root is not None else None
    dotted = ".".join(path)
    return f"{dotted} (line {line})" if line else dotted


def _merge(schema, defaults, data, path, root):
    if not isinstance(data, dict):
        raise ConfigError(f"{_where(root, path) or 'document'}: expected a mapping")
    out = copy.deepcopy(defaults)
    for key, val in data.items():
        p = path + (str(key),)
        if key not in schema:
            raise ConfigError(f"unknown key {_where(root, p)}")
        kind = schema[key]
        if isinstance(kind, dict):
            out[key] = _merge(kind, defaults.get(key, {}), val, p, root)
            continue
        if kind is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
            raise ConfigError(f"{_where(root, p)}: expected {kind.__name__}, got {type(val).__name__}")
        out[key] = val
    return out


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: str | None = None

    def __post_init__(self):
        self._validate()

    # --- access -------------------------------------------------------------

    @property
    def d(self) -> int:
        return self.data["grid"]["d"]

    @property
    def h(self) -> float:
        return self.data["grid"]["h"]

    @property
    def eps_list(self) -> list[float]:
        return [float(e) for e in self.data["grid"]["eps"]]

    @property
    def suites(self) -> list[str]:
        return list(self.data["suites"])

    @property
    def tol(self) -> float:
        return self.data["tolerances"]["solver"]

    @property
    def threads(self) -> int:
        return self.data["threads"]

    @property
    def output(self) -> str:
        return self.data["output"]

    def seeds(self, block: str = "seeds") -> list[int]:
        b = self.data["ensemble"][block]
        return list(range(b["start"], b["start"] + b["count"]))

    @property
    def normality_seeds(self) -> list[int]:
        s = self.data["ensemble"]["seeds"]["start"]
        return list(range(s, s + self.data["ensemble"]["normality_seeds"]))

    def coefficient(self, kind: str | None = None) -> CoefficientMapSpec:
        opts = dict(self.data["ensemble"]["coefficient"])
        if kind is not None:
            opts = {"kind": kind, **{k: v for k, v in opts.items() if k != "kind"}}
        return CoefficientMapSpec(**opts)

    @property
    def identity_maps(self) -> list[str]:
        return list(self.data["ensemble"]["identity_maps"])

    def ensemble_config(self, eps: float, kind: str | None = None, d: int | None = None):
        from .fluctuations import EnsembleConfig

        e = self.data["ensemble"]
        return EnsembleConfig(d=self.d if d is None else d, eps=eps, h=self.h,
                              kernel_radius=e["kernel"]["radius"], kernel_power=e["kernel"]["power"],
                              kappa=e["kappa"], coefficient=self.coefficient(kind), tol=self.tol)

    # --- derived -----------------------------------------------------------

    @property
    def digest(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, seeds: tuple[int, int] | None = None, threads: int | None = None,
                       tol: float | None = None, output: str | None = None) -> "RunConfig":
        data = copy.deepcopy(self.data)
        if seeds is not None:
            data["ensemble"]["seeds"] = {"start": seeds[0], "count": seeds[1]}
        if threads is not None:
            data["threads"] = threads
        if tol is not None:
            data["tolerances"]["solver"] = tol
        if output is not None:
            data["output"] = output
        return RunConfig(data, self.source)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    # --- validation --------------------------------------------------------

    def _validate(self):
        data = self.data
        if data.get("version") != VERSION:
            raise ConfigError(f"unsupported config version {data.get('version')!r}; expected {VERSION}")
        if data["grid"]["d"] not in (1, 2, 3):
            raise ConfigError(f"grid.d must be 1, 2 or 3, got {data['grid']['d']}")
        if not data["grid"]["h"] > 0:
            raise ConfigError("grid.h must be positive")
        eps = data["grid"]["eps"]
        if not eps or not all(isinstance(e, (int, float)) and 0 < e < 1 for e in eps):
            raise ConfigError(f"grid.eps must be a list of numbers in (0, 1), got {eps}")
        for e in eps:
            self.ensemble_config(float(e))  # N = 1 / (eps h) must be a valid grid
        bad = [s for s in data["suites"] if s not in SUITES]
        if bad:
            raise ConfigError(f"unknown suites {bad}; choose from {list(SUITES)}")
        for block in ("seeds", "calibration_seeds"):
            b = data["ensemble"][block]
            if b["count"] < 1 or b["start"] < 0:
                raise ConfigError(f"ensemble.{block} needs start >= 0 and count >= 1")
        ev = set(self.seeds())
        ev |= set(self.normality_seeds)
        if ev & set(self.seeds("calibration_seeds")):
            raise ConfigError("evaluation and calibration seed ranges overlap")
        for k in self.identity_maps:
            self.coefficient(k)
        if data["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        if not data["tolerances"]["solver"] > 0:
            raise ConfigError("tolerances.solver must be positive")


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    """Parse and validate a configuration file (or text); missing keys take defaults."""
    if path is not None:
        text = Path(path).read_text()
    if text is None:
        return RunConfig()
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    raw = {} if raw is None else raw
    try:
        data = _merge(_SCHEMA, DEFAULTS, raw, (), root)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        return RunConfig(data, str(path) if path else None)
    except TypeError as exc:  # bad coefficient options
        raise ConfigError(f"ensemble.coefficient: {exc}") from exc
