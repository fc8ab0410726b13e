"""Run configuration: a TOML file with strict keys plus HEIS_ environment overrides."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields

import tomli

from .corona import MAX_DEPTH, CoronaParams
from .graph_synth import SynthParams
from .para_grid import ParaRect
from .rugs import RugSpec

SCHEMA_VERSION = 1

RUG_FAMILY_KEYS = {
    "identity": set(),
    "plane": {"a", "b", "c"},
    "sine_perturbed": {"amplitude", "frequency"},
    "composite": {"breaks", "slopes", "offset"},
    "translated": {"g"},
    "rotated": {"theta"},
    "reflected": set(),
}
WRAPPERS = {"translated", "rotated", "reflected"}

SECTION_KEYS = {
    "root": {"n", "k", "l"},
    "corona": {f.name for f in fields(CoronaParams)} | {"signatures", "bvp", "bvp_limit"},
    "synth": {f.name for f in fields(SynthParams)} | {"tree", "grid_y", "grid_t"},
    "analyze": {"depth", "C", "thresholds"},
    "verify": {"pairs", "rects", "sweep"},
    "run": {"seed", "jobs", "probes"},
}
TOP_KEYS = {"schema_version", "rug"} | set(SECTION_KEYS)


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; the message names the offending line."""


@dataclass
class RunConfig:
    rug: RugSpec
    M_declared: float | None
    root: ParaRect
    corona: CoronaParams
    synth: SynthParams
    tree: int = 0
    grid_y: int = 129
    grid_t: int = 65
    signatures: bool = True
    bvp: bool = True
    bvp_limit: int = 64
    analyze_depth: int = 3
    analyze_C: float = 1.0
    thresholds: tuple = (0.01, 0.05, 0.1)
    verify_pairs: int = 1000
    verify_rects: int = 200
    sweep: tuple = (0.025, 0.05, 0.1, 0.2, 0.4)
    seed: int = 0
    jobs: int = 1
    probes: tuple = ()
    raw: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "rug": self.rug.as_dict(), "M_declared": self.M_declared,
            "root": [self.root.n, self.root.k, self.root.l],
            "corona": self.corona.as_dict(), "synth": self.synth.as_dict(), "tree": self.tree,
            "grid": [self.grid_y, self.grid_t], "signatures": self.signatures, "bvp": self.bvp,
            "bvp_limit": self.bvp_limit, "analyze": {"depth": self.analyze_depth, "C": self.analyze_C,
                                                     "thresholds": list(self.thresholds)},
            "verify": {"pairs": self.verify_pairs, "rects": self.verify_rects, "sweep": list(self.sweep)},
            "seed": self.seed, "probes": [[Q.n, Q.k, Q.l] for Q in self.probes],
        }


def _line_of(text: str, section: str | None, key: str) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (top level when section is None)."""
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        head = re.match(r"^\[\s*([^\]]+?)\s*\]", stripped)
        if head:
            current = head.group(1)
            if section is not None and current == section and key is None:
                return i
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return i
    return None


def _where(text: str, section: str | None, key: str) -> str:
    line = _line_of(text, section, key) if text else None
    return f"line {line}: " if line else ""


def _env_value(raw: str):
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def apply_env(data: dict, environ=None) -> dict:
    """Overlay HEIS_<SECTION>_<KEY>=value variables; values are read as TOML scalars."""
    environ = os.environ if environ is None else environ
    sections = sorted(set(SECTION_KEYS) | {"rug"}, key=len, reverse=True)
    for name, raw in sorted(environ.items()):
        if not name.startswith("HEIS_") or name in ("HEIS_CONFIG", "HEIS_OUT", "HEIS_JOBS", "HEIS_SEED"):
            continue
        rest = name[5:].lower()
        for sec in sections:
            if rest.startswith(sec + "_"):
                key = rest[len(sec) + 1:]
                break
        else:
            raise ConfigError(f"environment variable {name}: unknown section")
        data.setdefault(sec, {})[key] = _env_value(raw)
    return data


def _check_keys(text: str, section: str | None, got: dict, allowed: set):
    for key in got:
        if key not in allowed:
            label = f"[{section}] " if section else ""
            raise ConfigError(f"{_where(text, section, key)}unknown key {label}{key!r}")


def _rug_spec(text: str, data: dict, section: str) -> tuple[RugSpec, float | None]:
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be a table")
    family = data.get("family")
    if family not in RUG_FAMILY_KEYS:
        raise ConfigError(f"{_where(text, section, 'family')}[{section}] family must be one of "
                          f"{sorted(RUG_FAMILY_KEYS)}, got {family!r}")
    allowed = RUG_FAMILY_KEYS[family] | {"family", "M"} | ({"inner"} if family in WRAPPERS else set())
    _check_keys(text, section, data, allowed)
    inner = None
    if family in WRAPPERS:
        if "inner" not in data:
            raise ConfigError(f"[{section}] family {family!r} needs a [{section}.inner] table")
        inner, _ = _rug_spec(text, data["inner"], f"{section}.inner")
    params = {k: v for k, v in data.items() if k not in ("family", "M", "inner")}
    M = data.get("M")
    if M is not None and not (isinstance(M, (int, float)) and M >= 1):
        raise ConfigError(f"{_where(text, section, 'M')}declared M must be a number >= 1")
    return RugSpec(family, params, inner), (float(M) if M is not None else None)


def _typed(text, section, table, key, kind, default):
    if key not in table:
        return default
    v = table[key]
    ok = {
        int: isinstance(v, int) and not isinstance(v, bool),
        float: isinstance(v, (int, float)) and not isinstance(v, bool),
        bool: isinstance(v, bool),
    }.get(kind, True)
    if not ok:
        raise ConfigError(f"{_where(text, section, key)}[{section}] {key} must be {kind.__name__}, got {v!r}")
    return kind(v)


def _rect(text, section, key, value) -> ParaRect:
    if (not isinstance(value, (list, tuple)) or len(value) != 3
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
        raise ConfigError(f"{_where(text, section, key)}[{section}] {key} entries must be [n, k, l] integers")
    return ParaRect(*value)


def parse_probe(text: str) -> ParaRect:
    parts = text.split(",")
    try:
        n, k, l = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--probe expects n,k,l integers, got {text!r}") from None
    return ParaRect(n, k, l)


def load_config(path: str | None, environ=None) -> RunConfig:
    text = ""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        text = raw.decode("utf-8", errors="replace")
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(apply_env(data, environ), text)


def config_from_dict(data: dict, text: str = "") -> RunConfig:
    _check_keys(text, None, data, TOP_KEYS)
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{_where(text, None, 'schema_version')}unsupported schema_version {version!r}")
    for sec in SECTION_KEYS:
        if sec in data:
            if not isinstance(data[sec], dict):
                raise ConfigError(f"[{sec}] must be a table")
            _check_keys(text, sec, data[sec], SECTION_KEYS[sec])
    rug, M = _rug_spec(text, data.get("rug", {"family": "identity"}), "rug")

    r = data.get("root", {})
    root = ParaRect(_typed(text, "root", r, "n", int, 0), _typed(text, "root", r, "k", int, 0),
                    _typed(text, "root", r, "l", int, 0))

    c = data.get("corona", {})
    kinds = {"depth": int, "H": float}
    cp = {}
    for f in fields(CoronaParams):
        if f.name in c:
            if f.name == "H" and c["H"] is None:
                continue
            cp[f.name] = _typed(text, "corona", c, f.name, kinds.get(f.name, float), None)
    try:
        corona = CoronaParams(**cp)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if not 0 <= corona.depth <= MAX_DEPTH:
        raise ConfigError(f"{_where(text, 'corona', 'depth')}depth must lie in [0, {MAX_DEPTH}]")

    s = data.get("synth", {})
    sp = {}
    for f in fields(SynthParams):
        if f.name in s:
            sp[f.name] = _typed(text, "synth", s, f.name, int if f.name == "levels" else float, None)
    synth = SynthParams(**sp)
    if synth.eta <= 0 or min(synth.eps1, synth.eps2, synth.eps3) <= 0:
        raise ConfigError("[synth] eta and eps1..eps3 must be positive")

    a = data.get("analyze", {})
    v = data.get("verify", {})
    run = data.get("run", {})
    probes = tuple(_rect(text, "run", "probes", p) for p in run.get("probes", []))
    thresholds = a.get("thresholds", [0.01, 0.05, 0.1])
    sweep = v.get("sweep", [0.025, 0.05, 0.1, 0.2, 0.4])
    for name, seq, sec in (("thresholds", thresholds, "analyze"), ("sweep", sweep, "verify")):
        if not isinstance(seq, list) or not all(isinstance(x, (int, float)) and x > 0 for x in seq):
            raise ConfigError(f"{_where(text, sec, name)}[{sec}] {name} must be a list of positive numbers")
    cfg = RunConfig(
        rug=rug, M_declared=M, root=root, corona=corona, synth=synth,
        tree=_typed(text, "synth", s, "tree", int, 0),
        grid_y=_typed(text, "synth", s, "grid_y", int, 129),
        grid_t=_typed(text, "synth", s, "grid_t", int, 65),
        signatures=_typed(text, "corona", c, "signatures", bool, True),
        bvp=_typed(text, "corona", c, "bvp", bool, True),
        bvp_limit=_typed(text, "corona", c, "bvp_limit", int, 64),
        analyze_depth=_typed(text, "analyze", a, "depth", int, 3),
        analyze_C=_typed(text, "analyze", a, "C", float, 1.0),
        thresholds=tuple(float(x) for x in thresholds),
        verify_pairs=_typed(text, "verify", v, "pairs", int, 1000),
        verify_rects=_typed(text, "verify", v, "rects", int, 200),
        sweep=tuple(float(x) for x in sweep),
        seed=_typed(text, "run", run, "seed", int, 0),
        jobs=_typed(text, "run", run, "jobs", int, 1),
        probes=probes,
        raw=data,
    )
    if not 0 <= cfg.analyze_depth <= MAX_DEPTH:
        raise ConfigError(f"{_where(text, 'analyze', 'depth')}[analyze] depth must lie in [0, {MAX_DEPTH}]")
    if cfg.verify_pairs < 1000:
        raise ConfigError(f"{_where(text, 'verify', 'pairs')}[verify] pairs must be at least 1000")
    if cfg.jobs < 1:
        raise ConfigError("[run] jobs must be at least 1")
    return cfg
