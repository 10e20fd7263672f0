"""Scenario configuration, default T0/T1 topology and seeded sampling.

Scenario files are YAML mappings. Every key is optional except ``seed`` and
``duration``; omitted keys take the defaults below.  Quantities accept unit
suffixes (decimal): sizes ``"2GB"``, rates ``"200MB/s"`` or ``"10Gbps"``
(1 Gbps = 1.25e8 B/s) and durations ``"12h"``, ``"30m"`` or ``"90s"``.
Plain numbers are bytes, bytes/second and seconds.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import yaml

T1_CENTERS = ("T1-EU1", "T1-EU2", "T1-EU3", "T1-US1", "T1-US2", "T1-JP")
GBPS = 1.25e8
TRANSATLANTIC = "T0--T1-US1"

# fixed substream index per consumer of randomness
_STREAMS = {"raw": 0, "production": 1, "reproduction": 2, "analysis": 3}


class ScenarioError(ValueError):
    def __init__(self, key: str, message: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}{where}: {message}")
        self.key = key
        self.line = line


class ScenarioSyntaxError(ScenarioError):
    pass


class UnknownKey(ScenarioError):
    pass


class RangeViolation(ScenarioError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    id: str
    utc_offset: int = 0
    transit: bool = False


@dataclass(frozen=True)
class LinkSpec:
    a: str
    b: str
    capacity: float  # bytes/s per direction
    rtt_ms: float

    @property
    def id(self) -> str:
        return f"{self.a}--{self.b}"


@dataclass(frozen=True)
class Topology:
    nodes: tuple[NodeSpec, ...]
    links: tuple[LinkSpec, ...]

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        from .network import UnknownNode

        raise UnknownNode(node_id)

    def with_capacity(self, link_id: str, capacity: float) -> "Topology":
        if link_id not in {l.id for l in self.links}:
            raise KeyError(link_id)
        links = tuple(dataclasses.replace(l, capacity=capacity) if l.id == link_id else l for l in self.links)
        return dataclasses.replace(self, links=links)


def default_topology(transatlantic_gbps: float = 2.5, other_gbps: float = 10.0) -> Topology:
    """T0, a European mega-router and six T1 centers.

    RTT contributions reproduce the end-to-end T0<->T1 round trips; the
    T0-ROUTER hop contributes nothing.
    """
    nodes = (
        NodeSpec("T0", 1),
        NodeSpec("ROUTER", 1, transit=True),
        NodeSpec("T1-EU1", 1),
        NodeSpec("T1-EU2", 1),
        NodeSpec("T1-EU3", 1),
        NodeSpec("T1-US1", -6),
        NodeSpec("T1-US2", -6),
        NodeSpec("T1-JP", 9),
    )
    other = other_gbps * GBPS
    links = (
        LinkSpec("T0", "ROUTER", other, 0.0),
        LinkSpec("ROUTER", "T1-EU1", other, 20.0),
        LinkSpec("ROUTER", "T1-EU2", other, 25.0),
        LinkSpec("ROUTER", "T1-EU3", other, 30.0),
        LinkSpec("T0", "T1-US1", transatlantic_gbps * GBPS, 120.0),
        LinkSpec("T1-US1", "T1-US2", other, 60.0),
        LinkSpec("T1-US1", "T1-JP", other, 240.0),
    )
    return Topology(nodes, links)


@dataclass(frozen=True)
class AnalysisSpec:
    center: str
    local_hour: int = 9
    lookback_hours: float = 12.0


@dataclass(frozen=True)
class Activities:
    raw_replication: bool = True
    production: bool = True
    reproduction: bool = True
    analysis: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    duration: float
    topology: Topology = field(default_factory=default_topology)
    raw_rate: float = 2e8
    raw_mean_size: float = 2e9
    raw_sd_fraction: float = 0.1
    dst_ratio: float = 10.0
    dst_size_mode: str = "sampled"
    production_delay: float = 0.0
    window_bytes: float = 8e6
    max_concurrent_outbound: float = 8
    agent_enabled: bool = True
    agent_nodes: tuple[str, ...] = ("T0", "T1-US1")
    reproduction_start: float = 12 * 3600.0
    reproduction_fraction: float = 1 / 6
    analysis_centers: tuple[AnalysisSpec, ...] = (AnalysisSpec("T1-JP", 9, 12.0),)
    analysis_include_t0: bool = True
    analysis_max_inflight: int = 48
    epoch_utc_offset: float = 0.0
    activities: Activities = field(default_factory=Activities)
    metric_bin: float = 300.0
    transatlantic_link: str = TRANSATLANTIC
    sweep: tuple[float, ...] | None = None

    @property
    def reproduction_rate(self) -> float:
        """RAW bytes per second each T1 reprocesses."""
        return self.raw_rate * self.reproduction_fraction

    def transatlantic_capacity(self) -> float:
        for l in self.topology.links:
            if l.id == self.transatlantic_link:
                return l.capacity
        raise KeyError(self.transatlantic_link)

    def with_transatlantic(self, capacity: float) -> "ScenarioConfig":
        return dataclasses.replace(
            self, topology=self.topology.with_capacity(self.transatlantic_link, capacity)
        )

    def digest(self) -> str:
        return hashlib.sha256(dump_scenario(self).encode()).hexdigest()


@dataclass
class DataFile:
    id: str
    cls: str  # "RAW" or "DST"
    size: float
    created_at: float
    origin: str
    parent: str | None = None
    holders: set[str] = field(default_factory=set)

    def __post_init__(self):
        if not self.size > 0:
            raise ValueError(f"file {self.id}: size must be > 0")
        self.holders.add(self.origin)


# --------------------------------------------------------------------- units
_SIZE_UNITS = {"": 1.0, "B": 1.0, "KB": 1e3, "MB": 1e6, "GB": 1e9, "TB": 1e12}
_BIT_UNITS = {"bps": 1 / 8, "Kbps": 1e3 / 8, "Mbps": 1e6 / 8, "Gbps": 1e9 / 8, "Tbps": 1e12 / 8}
_TIME_UNITS = {"": 1.0, "s": 1.0, "m": 60.0, "min": 60.0, "h": 3600.0, "d": 86400.0}
_NUM = r"([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)"


def _number(value: Any, key: str, units: dict[str, float], kind: str) -> float:
    if isinstance(value, bool):
        raise RangeViolation(key, f"expected a {kind}, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        m = re.fullmatch(_NUM + r"\s*([A-Za-z/]*)", value.strip())
        if m and m.group(2) in units:
            return float(m.group(1)) * units[m.group(2)]
    raise RangeViolation(key, f"expected a {kind}, got {value!r}")


def parse_size(value: Any, key: str = "size") -> float:
    return _number(value, key, _SIZE_UNITS, "size like '2GB'")


def parse_rate(value: Any, key: str = "rate") -> float:
    units = {k + "/s": v for k, v in _SIZE_UNITS.items() if k} | _BIT_UNITS | {"": 1.0}
    return _number(value, key, units, "rate like '200MB/s' or '10Gbps'")


def parse_duration(value: Any, key: str = "duration") -> float:
    return _number(value, key, _TIME_UNITS, "duration like '24h'")


# ------------------------------------------------------------------- parsing
_TOP_KEYS = {f.name for f in dataclasses.fields(ScenarioConfig)}


def _key_lines(node, prefix="", out=None) -> dict[str, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _key_lines(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = v.start_mark.line + 1
            _key_lines(v, path, out)
    return out


class _Reader:
    def __init__(self, lines: dict[str, int]):
        self.lines = lines

    def fail(self, exc_type, key: str, msg: str):
        raise exc_type(key, msg, self.lines.get(key))

    def mapping(self, value, key: str, allowed: set[str]) -> dict:
        if not isinstance(value, dict):
            self.fail(RangeViolation, key, "expected a mapping")
        for k in value:
            if k not in allowed:
                path = f"{key}.{k}" if key else str(k)
                self.fail(UnknownKey, path, f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return value

    def wrap(self, fn, value, key):
        try:
            return fn(value, key)
        except ScenarioError as exc:
            raise RangeViolation(key, str(exc).split(": ", 1)[-1], self.lines.get(key)) from None

    def check(self, ok: bool, key: str, msg: str):
        if not ok:
            self.fail(RangeViolation, key, msg)


def _as_bool(r: _Reader, value, key):
    r.check(isinstance(value, bool), key, f"expected true/false, got {value!r}")
    return value


def _as_int(r: _Reader, value, key):
    r.check(isinstance(value, int) and not isinstance(value, bool), key, f"expected an integer, got {value!r}")
    return value


def _parse_topology(r: _Reader, raw) -> Topology:
    raw = r.mapping(raw, "topology", {"nodes", "links"})
    nodes = []
    for i, n in enumerate(raw.get("nodes") or []):
        key = f"topology.nodes[{i}]"
        n = r.mapping(n, key, {"id", "utc_offset", "transit"})
        r.check("id" in n and isinstance(n["id"], str), key, "node needs a string id")
        nodes.append(NodeSpec(n["id"], _as_int(r, n.get("utc_offset", 0), key + ".utc_offset"),
                              _as_bool(r, n.get("transit", False), key + ".transit")))
    links = []
    ids = {n.id for n in nodes}
    for i, l in enumerate(raw.get("links") or []):
        key = f"topology.links[{i}]"
        l = r.mapping(l, key, {"a", "b", "capacity", "rtt_ms"})
        for end in ("a", "b"):
            r.check(l.get(end) in ids, f"{key}.{end}", f"unknown node {l.get(end)!r}")
        r.check("capacity" in l, key, "link needs a capacity")
        cap = r.wrap(parse_rate, l["capacity"], key + ".capacity")
        r.check(cap > 0, key + ".capacity", "capacity must be > 0")
        rtt = l.get("rtt_ms", 0.0)
        r.check(isinstance(rtt, (int, float)) and not isinstance(rtt, bool) and rtt >= 0,
                key + ".rtt_ms", "rtt_ms must be a number >= 0")
        links.append(LinkSpec(l["a"], l["b"], cap, float(rtt)))
    r.check(len(nodes) >= 2, "topology.nodes", "at least two nodes required")
    return Topology(tuple(nodes), tuple(links))


def config_from_dict(doc: dict, lines: dict[str, int] | None = None) -> ScenarioConfig:
    """Validate a decoded scenario mapping and fill defaults."""
    r = _Reader(lines or {})
    doc = r.mapping(doc, "", _TOP_KEYS)
    for req in ("seed", "duration"):
        if req not in doc:
            r.fail(RangeViolation, req, "required key missing")
    kw: dict[str, Any] = {}
    seed = _as_int(r, doc["seed"], "seed")
    r.check(0 <= seed < 2**64, "seed", "seed must be a 64-bit unsigned integer")
    kw["seed"] = seed
    kw["duration"] = r.wrap(parse_duration, doc["duration"], "duration")
    r.check(kw["duration"] > 0, "duration", "duration must be > 0")
    if "topology" in doc:
        kw["topology"] = _parse_topology(r, doc["topology"])
    for k in ("raw_rate",):
        if k in doc:
            kw[k] = r.wrap(parse_rate, doc[k], k)
    for k in ("raw_mean_size", "window_bytes"):
        if k in doc:
            kw[k] = r.wrap(parse_size, doc[k], k)
    for k in ("reproduction_start", "production_delay", "metric_bin"):
        if k in doc:
            kw[k] = r.wrap(parse_duration, doc[k], k)
    for k in ("raw_sd_fraction", "dst_ratio", "reproduction_fraction", "epoch_utc_offset"):
        if k in doc:
            v = doc[k]
            r.check(isinstance(v, (int, float)) and not isinstance(v, bool), k, f"expected a number, got {v!r}")
            kw[k] = float(v)
    for k in ("agent_enabled", "analysis_include_t0"):
        if k in doc:
            kw[k] = _as_bool(r, doc[k], k)
    if "analysis_max_inflight" in doc:
        kw["analysis_max_inflight"] = _as_int(r, doc["analysis_max_inflight"], "analysis_max_inflight")
    if "max_concurrent_outbound" in doc:
        v = doc["max_concurrent_outbound"]
        if v in ("unlimited", None, math.inf):
            kw["max_concurrent_outbound"] = math.inf
        else:
            kw["max_concurrent_outbound"] = _as_int(r, v, "max_concurrent_outbound")
    if "dst_size_mode" in doc:
        r.check(doc["dst_size_mode"] in ("sampled", "derived"), "dst_size_mode", "must be 'sampled' or 'derived'")
        kw["dst_size_mode"] = doc["dst_size_mode"]
    if "agent_nodes" in doc:
        v = doc["agent_nodes"]
        r.check(isinstance(v, list) and all(isinstance(x, str) for x in v), "agent_nodes", "expected a list of node ids")
        kw["agent_nodes"] = tuple(v)
    if "transatlantic_link" in doc:
        kw["transatlantic_link"] = str(doc["transatlantic_link"])
    if "activities" in doc:
        fields = {f.name for f in dataclasses.fields(Activities)}
        a = r.mapping(doc["activities"], "activities", fields)
        kw["activities"] = Activities(**{k: _as_bool(r, v, f"activities.{k}") for k, v in a.items()})
    if "analysis_centers" in doc:
        v = doc["analysis_centers"]
        r.check(isinstance(v, list), "analysis_centers", "expected a list")
        specs = []
        for i, item in enumerate(v):
            key = f"analysis_centers[{i}]"
            item = r.mapping(item, key, {"center", "local_hour", "lookback_hours"})
            r.check(isinstance(item.get("center"), str), key, "center id required")
            hour = _as_int(r, item.get("local_hour", 9), key + ".local_hour")
            r.check(0 <= hour <= 23, key + ".local_hour", "local_hour must be in 0..23")
            lb = item.get("lookback_hours", 12)
            r.check(isinstance(lb, (int, float)) and not isinstance(lb, bool) and lb > 0,
                    key + ".lookback_hours", "lookback_hours must be > 0")
            specs.append(AnalysisSpec(item["center"], hour, float(lb)))
        kw["analysis_centers"] = tuple(specs)
    if "sweep" in doc and doc["sweep"] is not None:
        v = doc["sweep"]
        r.check(isinstance(v, list) and len(v) > 0, "sweep", "expected a nonempty list of capacities")
        kw["sweep"] = tuple(r.wrap(parse_rate, x, f"sweep[{i}]") for i, x in enumerate(v))

    cfg = ScenarioConfig(**kw)
    _validate(r, cfg)
    return cfg


def _validate(r: _Reader, c: ScenarioConfig) -> None:
    r.check(c.raw_rate > 0, "raw_rate", "must be > 0")
    r.check(c.raw_mean_size > 0, "raw_mean_size", "must be > 0")
    r.check(0 <= c.raw_sd_fraction < 1, "raw_sd_fraction", f"must be in [0, 1), got {c.raw_sd_fraction}")
    r.check(c.dst_ratio > 1, "dst_ratio", "must be > 1")
    r.check(0 < c.reproduction_fraction <= 1, "reproduction_fraction", "must be in (0, 1]")
    r.check(c.window_bytes > 0, "window_bytes", "must be > 0")
    r.check(c.max_concurrent_outbound >= 1, "max_concurrent_outbound", "must be >= 1 or 'unlimited'")
    r.check(c.reproduction_start >= 0, "reproduction_start", "must be >= 0")
    r.check(c.production_delay >= 0, "production_delay", "must be >= 0")
    r.check(c.metric_bin > 0, "metric_bin", "must be > 0")
    r.check(c.analysis_max_inflight >= 1, "analysis_max_inflight", "must be >= 1")
    ids = {n.id for n in c.topology.nodes}
    for a in c.agent_nodes:
        r.check(a in ids, "agent_nodes", f"unknown node {a!r}")
    for i, a in enumerate(c.analysis_centers):
        r.check(a.center in ids, f"analysis_centers[{i}].center", f"unknown node {a.center!r}")
    r.check(c.transatlantic_link in {l.id for l in c.topology.links}, "transatlantic_link",
            f"no link {c.transatlantic_link!r}")


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioSyntaxError("<document>", str(getattr(exc, "problem", exc)), line) from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ScenarioSyntaxError("<document>", "top level must be a mapping", 1)
    return config_from_dict(doc, _key_lines(node))


def config_to_dict(c: ScenarioConfig) -> dict:
    d: dict[str, Any] = {
        "seed": c.seed,
        "duration": c.duration,
        "topology": {
            "nodes": [{"id": n.id, "utc_offset": n.utc_offset, "transit": n.transit} for n in c.topology.nodes],
            "links": [{"a": l.a, "b": l.b, "capacity": l.capacity, "rtt_ms": l.rtt_ms} for l in c.topology.links],
        },
    }
    for f in dataclasses.fields(c):
        if f.name in d:
            continue
        v = getattr(c, f.name)
        if f.name == "analysis_centers":
            v = [dataclasses.asdict(a) for a in v]
        elif f.name == "activities":
            v = dataclasses.asdict(v)
        elif f.name == "max_concurrent_outbound":
            v = "unlimited" if math.isinf(v) else int(v)
        elif isinstance(v, tuple):
            v = list(v)
        d[f.name] = v
    return d


def dump_scenario(c: ScenarioConfig) -> str:
    return yaml.safe_dump(config_to_dict(c), sort_keys=False)


def load_scenario(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# ------------------------------------------------------------------ sampling
def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent PCG64 substream for one named activity."""
    ss = np.random.SeedSequence(seed, spawn_key=(_STREAMS[name],))
    return np.random.Generator(np.random.PCG64(ss))


def sample_file_size(rng: np.random.Generator, mean: float, sd_fraction: float) -> float:
    """Normal(mean, sd_fraction*mean) truncated to +-4 sd, whole bytes, >= 1."""
    if sd_fraction == 0:
        return float(mean)
    sd = sd_fraction * mean
    lo, hi = mean - 4 * sd, mean + 4 * sd
    while True:
        x = rng.normal(mean, sd)
        if lo <= x <= hi:
            return max(1.0, float(round(x)))


def local_start_time(center, local_hour: int, epoch_utc_offset: float = 0.0,
                     topology: Topology | None = None) -> float:
    """First simulated second >= 0 at which ``center`` reads ``local_hour``:00.

    Time zero is midnight at UTC offset ``epoch_utc_offset`` (UTC by default).
    ``center`` is a node id looked up in ``topology`` or a node spec.
    """
    if isinstance(center, str):
        center = (topology or default_topology()).node(center)
    offset = center.utc_offset
    return ((local_hour - offset + epoch_utc_offset) % 24) * 3600.0
