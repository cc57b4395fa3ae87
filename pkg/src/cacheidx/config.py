"""INI configuration shared by the cluster runtime, model and bench driver.

Recognised sections and keys::

    [topology]   slaves, masters
    [batch]      bytes, timeout_ms, window
    [engine]     kind, l1_bytes, l2_bytes, line_bytes
    [transport]  kind (loopback|tcp), listen (host:port), peers (comma separated host:port)
    [workload]   seed, keys, index_keys
    [experiment] methods, batch_bytes, nodes, repetitions, normalize
    [profile]    base (pentium3|none) and any MachineProfile field
    [shape]      preset (table1) or lam + subtree_levels, or
                 tree_bytes + levels + fanout + line_bytes + subtree_levels
    [scaling]    any ScalingAssumptions field

Sizes accept K/M/G suffixes (binary), e.g. ``128K`` or ``3.2MiB``.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .cluster.runtime import DEFAULT_WINDOW, BatchingPolicy
from .engines import CacheGeometry, EngineKind
from .model import MachineProfile, ScalingAssumptions, TreeShape, pentium3_profile, reference_shape
from .workload import ExperimentSpec, WorkloadSpec

TRANSPORT_KINDS = ("loopback", "tcp")

KNOWN_KEYS = {
    "topology": {"slaves", "masters"},
    "batch": {"bytes", "timeout_ms", "window"},
    "engine": {"kind", "l1_bytes", "l2_bytes", "line_bytes"},
    "transport": {"kind", "listen", "peers"},
    "workload": {"seed", "keys", "index_keys"},
    "experiment": {"methods", "batch_bytes", "nodes", "repetitions", "normalize"},
    "profile": {"base"} | {f.name.lower() for f in dataclasses.fields(MachineProfile)},
    "shape": {"preset", "lam", "subtree_levels", "tree_bytes", "levels", "fanout", "line_bytes", "key_bytes"},
    "scaling": {f.name.lower() for f in dataclasses.fields(ScalingAssumptions)},
}


class ConfigError(ValueError):
    pass


_SIZE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*([kKmMgG]?)(?:i?[bB])?\s*$")
_SCALE = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30}


def parse_size(text: str | int | float) -> float:
    if isinstance(text, (int, float)):
        return text
    m = _SIZE.match(text)
    if not m:
        raise ConfigError(f"not a size: {text!r}")
    return float(m.group(1)) * _SCALE[m.group(2).lower()]


def parse_int_size(text: str | int) -> int:
    value = parse_size(text)
    if value != int(value):
        raise ConfigError(f"size {text!r} is not a whole number of bytes")
    return int(value)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


@dataclass(frozen=True)
class Settings:
    slaves: int = 4
    masters: int = 1
    policy: BatchingPolicy = BatchingPolicy()
    window: int = DEFAULT_WINDOW
    engine_kind: EngineKind = EngineKind.C3
    geometry: CacheGeometry = CacheGeometry()
    transport: str = "loopback"
    listen: str | None = None
    peers: tuple[str, ...] = ()
    workload: WorkloadSpec = WorkloadSpec()
    experiment: ExperimentSpec = ExperimentSpec()
    profile: MachineProfile | None = None
    shape: TreeShape | None = None
    scaling: ScalingAssumptions = ScalingAssumptions()
    sources: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.slaves < 1 or self.masters < 1:
            raise ConfigError("topology needs at least one master and one slave")
        if self.transport not in TRANSPORT_KINDS:
            raise ConfigError(f"transport.kind must be one of {TRANSPORT_KINDS}, got {self.transport!r}")

    def replace(self, **changes) -> "Settings":
        return dataclasses.replace(self, **changes)


def read_parser(paths: Iterable[str | Path]) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str.lower
    for path in paths:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    for section in parser.sections():
        known = KNOWN_KEYS.get(section)
        if known is None:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
    return parser


def profile_from_section(section) -> MachineProfile:
    fields = {f.name.lower(): f for f in dataclasses.fields(MachineProfile)}
    values = {}
    for key, raw in section.items():
        if key == "base":
            continue
        f = fields[key]
        if f.name in ("C2", "C1", "B2", "B1", "num_masters", "num_slaves", "key_bytes"):
            values[f.name] = parse_int_size(raw)
        elif f.name == "overlap_communication":
            values[f.name] = _bool(raw)
        elif raw.strip().lower() in ("", "none", "default"):
            values[f.name] = None
        else:
            values[f.name] = float(parse_size(raw))
    base = section.get("base", "pentium3").strip().lower()
    try:
        if base == "pentium3":
            return pentium3_profile(**values)
        if base == "none":
            return MachineProfile(**values)
    except TypeError as exc:
        raise ConfigError(f"incomplete [profile]: {exc}") from exc
    raise ConfigError(f"unknown profile base {base!r}")


def shape_from_section(section) -> TreeShape:
    if "preset" in section:
        if section["preset"].strip().lower() != "table1":
            raise ConfigError(f"unknown shape preset {section['preset']!r}")
        return reference_shape()
    key_bytes = int(section.get("key_bytes", "4"))
    if "lam" in section:
        lam = [float(x) for x in _list(section["lam"])]
        L = int(section.get("subtree_levels", str(len(lam))))
        return TreeShape(T=len(lam), L=L, lam=tuple(lam), key_bytes=key_bytes)
    try:
        return TreeShape.from_footprint(
            tree_bytes=parse_size(section["tree_bytes"]), levels=int(section["levels"]),
            fanout=int(section["fanout"]), line_bytes=parse_int_size(section.get("line_bytes", "32")),
            subtree_levels=int(section["subtree_levels"]), key_bytes=key_bytes)
    except KeyError as exc:
        raise ConfigError(f"[shape] is missing {exc.args[0]}") from None


def scaling_from_section(section) -> ScalingAssumptions:
    values = {}
    for f in dataclasses.fields(ScalingAssumptions):
        raw = section.get(f.name.lower())
        if raw is not None:
            values[f.name] = _bool(raw) if f.type in (bool, "bool") else float(raw)
    return ScalingAssumptions(**values)


def settings_from_parser(parser: configparser.ConfigParser, base: Settings = Settings()) -> Settings:
    s = base
    try:
        if parser.has_section("topology"):
            sec = parser["topology"]
            s = s.replace(slaves=sec.getint("slaves", s.slaves), masters=sec.getint("masters", s.masters))
        if parser.has_section("batch"):
            sec = parser["batch"]
            batch_bytes = parse_int_size(sec.get("bytes", str(s.policy.batch_bytes)))
            timeout = float(sec.get("timeout_ms", str(s.policy.flush_timeout * 1e3))) / 1e3
            s = s.replace(policy=BatchingPolicy(batch_bytes, timeout), window=sec.getint("window", s.window))
        if parser.has_section("engine"):
            sec = parser["engine"]
            g = s.geometry
            s = s.replace(
                engine_kind=EngineKind.parse(sec.get("kind", s.engine_kind.value)),
                geometry=CacheGeometry(parse_int_size(sec.get("l1_bytes", str(g.l1_bytes))),
                                       parse_int_size(sec.get("l2_bytes", str(g.l2_bytes))),
                                       parse_int_size(sec.get("line_bytes", str(g.line_bytes)))))
        if parser.has_section("transport"):
            sec = parser["transport"]
            s = s.replace(transport=sec.get("kind", s.transport).strip().lower(),
                          listen=sec.get("listen", s.listen),
                          peers=tuple(_list(sec["peers"])) if "peers" in sec else s.peers)
        if parser.has_section("workload"):
            sec = parser["workload"]
            w = s.workload
            s = s.replace(workload=WorkloadSpec(
                seed=int(sec.get("seed", str(w.seed)), 0),
                key_count=parse_int_size(sec.get("keys", str(w.key_count))),
                index_key_count=parse_int_size(sec.get("index_keys", str(w.index_key_count)))))
        if parser.has_section("experiment"):
            sec = parser["experiment"]
            e = s.experiment
            s = s.replace(experiment=ExperimentSpec(
                methods=tuple(_list(sec["methods"])) if "methods" in sec else e.methods,
                batch_bytes_list=(tuple(parse_int_size(b) for b in _list(sec["batch_bytes"]))
                                  if "batch_bytes" in sec else e.batch_bytes_list),
                nodes=sec.getint("nodes", e.nodes),
                repetitions=sec.getint("repetitions", e.repetitions),
                normalize_divisor=sec.getint("normalize", e.normalize_divisor)))
        if parser.has_section("profile"):
            s = s.replace(profile=profile_from_section(parser["profile"]))
        if parser.has_section("shape"):
            s = s.replace(shape=shape_from_section(parser["shape"]))
        if parser.has_section("scaling"):
            s = s.replace(scaling=scaling_from_section(parser["scaling"]))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return s


def load_settings(*paths: str | Path, base: Settings = Settings()) -> Settings:
    paths = [p for p in paths if p]
    s = settings_from_parser(read_parser(paths), base)
    return s.replace(sources=tuple(str(p) for p in paths))
