"""Experiment configuration: INI files with fixed sections and a strict key schema.

Example::

    [domain]
    lower = 0, 0, 0
    upper = pi, pi, pi

    [mesh]
    levels = 2, 4, 8

    [medium]
    eps = 1
    mu = 1

    [noise]
    kind = cavity          ; none | cavity | critical
    modes = 1:1, 1:2       ; cavity kind: mode indices m:n
    variances = 0.5, 0.2   ; one per mode (given to both members of the pair)
    k = 2                  ; critical kind: regularity class
    n_modes = 32           ; critical kind: number of diagonal modes (j, j)
    trace = 1.0            ; critical kind: Tr(Q)

    [scheme]
    T = 1.0
    steps = 4, 8, 16, 32, 64
    reference_refinement = 64
    u0 = mode:1:1          ; zero | mode:m:n | linear-x (E = (x1, 0, 0))
    u0_scale = 1.0

    [mc]
    paths = 500
    seed = 20240601
    workers = 1
    chunk = 10

    [output]
    directory = results/run

Numbers may use ``pi`` in simple arithmetic expressions (``pi/2``, ``2*pi``).
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import ast
import configparser
import hashlib
import json
import math
import operator
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Tuple

__all__ = [
    "ConfigError",
    "DomainConfig",
    "MeshConfig",
    "MediumConfig",
    "NoiseConfig",
    "SchemeConfig",
    "McConfig",
    "OutputConfig",
    "RunConfig",
    "parse_config",
    "load_config",
    "parse_number",
]


class ConfigError(ValueError):
    pass


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}


def parse_number(text: str) -> float:
    """Float from a literal or a small arithmetic expression in ``pi``."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        raise ConfigError(f"cannot parse number {text!r}")

    try:
        return ev(ast.parse(text, mode="eval"))
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse number {text!r}") from exc


def _floats(text: str) -> Tuple[float, ...]:
    items = [t for t in text.split(",") if t.strip()]
    return tuple(parse_number(t) for t in items)


def _ints(text: str) -> Tuple[int, ...]:
    out = []
    for t in text.split(","):
        if not t.strip():
            continue
        v = parse_number(t)
        if v != int(v):
            raise ConfigError(f"expected an integer, got {t.strip()!r}")
        out.append(int(v))
    return tuple(out)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class DomainConfig:
    lower: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    upper: Tuple[float, float, float] = (math.pi, math.pi, math.pi)


@dataclass(frozen=True)
class MeshConfig:
    levels: Tuple[int, ...] = (2, 4, 8)


@dataclass(frozen=True)
class MediumConfig:
    eps: Tuple[float, ...] = (1.0,)
    mu: Tuple[float, ...] = (1.0,)
    breaks_x: Tuple[float, ...] = ()
    breaks_y: Tuple[float, ...] = ()
    breaks_z: Tuple[float, ...] = ()

    @property
    def constant(self) -> bool:
        return len(set(self.eps)) == 1 and len(set(self.mu)) == 1


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "cavity"
    modes: Tuple[Tuple[int, int], ...] = ((1, 1),)
    variances: Tuple[float, ...] = (0.5,)
    k: int = 2
    n_modes: int = 32
    trace: float = 1.0


@dataclass(frozen=True)
class SchemeConfig:
    T: float = 1.0
    steps: Tuple[int, ...] = (4, 8, 16, 32, 64)
    reference_refinement: int = 64
    u0: str = "mode:1:1"
    u0_scale: float = 1.0
    solver: str = "auto"
    quad_degree: int = 8
    slope_min: Optional[float] = None
    slope_max: Optional[float] = None


@dataclass(frozen=True)
class McConfig:
    paths: int = 200
    seed: int = 20240601
    workers: int = 1
    chunk: int = 10
    shared_paths: bool = True
    test_functions: int = 200


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "results"
    vtk_stride: int = 1
    export_matrices: bool = False


_PARSERS = {
    "domain": {"lower": _floats, "upper": _floats},
    "mesh": {"levels": _ints},
    "medium": {"eps": _floats, "mu": _floats, "breaks_x": _floats, "breaks_y": _floats, "breaks_z": _floats},
    "noise": {"kind": str.strip, "modes": None, "variances": _floats, "k": lambda s: int(parse_number(s)),
              "n_modes": lambda s: int(parse_number(s)), "trace": parse_number},
    "scheme": {"T": parse_number, "steps": _ints, "reference_refinement": lambda s: int(parse_number(s)),
               "u0": str.strip, "u0_scale": parse_number, "solver": str.strip,
               "quad_degree": lambda s: int(parse_number(s)), "slope_min": parse_number,
               "slope_max": parse_number},
    "mc": {"paths": lambda s: int(parse_number(s)), "seed": lambda s: int(s.strip()),
           "workers": lambda s: int(parse_number(s)), "chunk": lambda s: int(parse_number(s)),
           "shared_paths": _bool, "test_functions": lambda s: int(parse_number(s))},
    "output": {"directory": str.strip, "vtk_stride": lambda s: int(parse_number(s)),
               "export_matrices": _bool},
}


def _modes(text: str) -> Tuple[Tuple[int, int], ...]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 2:
            raise ConfigError(f"mode must be written m:n, got {item!r}")
        out.append((int(parts[0]), int(parts[1])))
    return tuple(out)


_PARSERS["noise"]["modes"] = _modes


@dataclass(frozen=True)
class RunConfig:
    domain: DomainConfig = field(default_factory=DomainConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    medium: MediumConfig = field(default_factory=MediumConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    mc: McConfig = field(default_factory=McConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        _validate(self)

    def with_updates(self, **sections) -> "RunConfig":
        """Copy with per-section field updates, e.g. ``with_updates(mc={"paths": 10})``."""
        kw = {}
        for name, updates in sections.items():
            kw[name] = replace(getattr(self, name), **updates)
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)

    def provenance_dict(self) -> dict:
        """Settings that determine the numbers (worker count and output location excluded)."""
        d = self.as_dict()
        d["mc"].pop("workers")
        d.pop("output")
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.provenance_dict(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()


def _validate(cfg: RunConfig) -> None:
    d = cfg.domain
    if len(d.lower) != 3 or len(d.upper) != 3:
        raise ConfigError("domain extents need three values each")
    if any(u <= l for l, u in zip(d.lower, d.upper)):
        raise ConfigError("domain upper bounds must exceed lower bounds")
    if not cfg.mesh.levels or min(cfg.mesh.levels) < 1:
        raise ConfigError("mesh levels must be a nonempty list of positive integers")
    if not cfg.scheme.steps or min(cfg.scheme.steps) < 1:
        raise ConfigError("scheme steps must be a nonempty list of positive integers")
    if not cfg.scheme.T > 0:
        raise ConfigError("final time T must be positive")
    if cfg.noise.kind not in ("none", "cavity", "critical"):
        raise ConfigError(f"unknown noise kind {cfg.noise.kind!r}")
    if cfg.noise.kind == "cavity":
        if not cfg.noise.modes:
            raise ConfigError("cavity noise needs at least one mode")
        if len(cfg.noise.variances) not in (1, len(cfg.noise.modes)):
            raise ConfigError("cavity noise needs one variance per mode (or a single shared one)")
        if min(cfg.noise.variances) <= 0:
            raise ConfigError("noise variances must be positive")
    if cfg.noise.kind == "critical":
        if cfg.noise.k not in (1, 2):
            raise ConfigError("noise regularity class k must be 1 or 2")
        if cfg.noise.n_modes < 1 or not cfg.noise.trace > 0:
            raise ConfigError("critical noise needs n_modes >= 1 and a positive trace")
    if cfg.mc.paths < 1 or cfg.mc.chunk < 1 or cfg.mc.workers < 1:
        raise ConfigError("mc paths, chunk and workers must be positive")
    if not cfg.mc.shared_paths:
        raise ConfigError("convergence studies require shared noise paths across resolutions")
    if cfg.scheme.reference_refinement < 1:
        raise ConfigError("reference refinement must be >= 1")
    m = cfg.medium
    if min(m.eps + m.mu) <= 0:
        raise ConfigError("medium coefficients must be positive")
    u0 = cfg.scheme.u0
    if not (u0 in ("zero", "linear-x") or u0.startswith("mode:")):
        raise ConfigError(f"unknown initial data {u0!r}")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str  # keep key case (T)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sections = {}
    classes = {"domain": DomainConfig, "mesh": MeshConfig, "medium": MediumConfig, "noise": NoiseConfig,
               "scheme": SchemeConfig, "mc": McConfig, "output": OutputConfig}
    for name in cp.sections():
        if name not in _PARSERS:
            raise ConfigError(f"unknown section [{name}]")
        values = {}
        for key, raw in cp.items(name):
            if key not in _PARSERS[name]:
                raise ConfigError(f"unknown key {key!r} in section [{name}]")
            try:
                values[key] = _PARSERS[name][key](raw)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"bad value for [{name}] {key}: {raw!r}") from exc
        sections[name] = classes[name](**values)
    return RunConfig(**sections)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
