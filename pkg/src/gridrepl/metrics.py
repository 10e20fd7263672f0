"""Flow logs, per-direction link usage and CSV export.

All exports are deterministic: fixed headers, fixed row order and numbers in
positional notation with at most 9 significant digits.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

FLOW_HEADER = ("flow_id", "file_id", "class", "activity", "src", "dst", "bytes",
               "opened_at", "started_at", "completed_at")
LINK_HEADER = ("bin_start", "link", "direction", "bytes", "utilization")
BACKLOG_HEADER = ("time", "direction", "queued_flows", "queued_bytes", "live_flows")


class DuplicateFlow(ValueError):
    pass


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class FlowRecord:
    flow_id: int
    file_id: str
    cls: str
    activity: str
    src: str
    dst: str
    bytes: float
    opened_at: float
    started_at: float
    completed_at: float

    def __post_init__(self):
        if not self.bytes > 0:
            raise ValueError("flow record needs bytes > 0")
        if not self.opened_at <= self.started_at <= self.completed_at:
            raise ValueError(f"flow {self.flow_id}: times out of order")

    @property
    def transfer_time(self) -> float:
        return self.completed_at - self.started_at

    @property
    def queue_wait(self) -> float:
        return self.started_at - self.opened_at

    @classmethod
    def from_flow(cls, flow) -> "FlowRecord":
        t = flow.tags
        return cls(flow.id, t["file"], t["class"], t["activity"], flow.src, flow.dst, flow.total_bytes,
                   flow.opened_at, flow.started_at, flow.completed_at)


class FlowLog:
    """Completed flows ordered by completion time, then flow id."""

    def __init__(self):
        self._records: list[FlowRecord] = []
        self._ids: set[int] = set()
        self._sorted = True

    def record(self, rec: FlowRecord) -> None:
        if rec.flow_id in self._ids:
            raise DuplicateFlow(f"flow {rec.flow_id} already recorded")
        self._ids.add(rec.flow_id)
        if self._records and (rec.completed_at, rec.flow_id) < (self._records[-1].completed_at, self._records[-1].flow_id):
            self._sorted = False
        self._records.append(rec)

    @property
    def records(self) -> list[FlowRecord]:
        if not self._sorted:
            self._records.sort(key=lambda r: (r.completed_at, r.flow_id))
            self._sorted = True
        return self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class LinkUsageBin:
    bin_start: float
    link: str
    direction: str
    bytes: float
    utilization: float


def integrate(history: Sequence[tuple[float, float]], t0: float, t1: float) -> float:
    """Integral over [t0, t1] of a piecewise-constant ``(time, value)`` series."""
    total = 0.0
    for k, (ts, value) in enumerate(history):
        te = history[k + 1][0] if k + 1 < len(history) else math.inf
        lo, hi = max(ts, t0), min(te, t1)
        if hi > lo and value:
            total += value * (hi - lo)
    return total


def bin_link_usage(histories, bin_width: float, duration: float) -> list[LinkUsageBin]:
    """Bin piecewise-constant rate histories into fixed-width windows.

    ``histories`` yields ``(link_id, direction, capacity, history)``; each
    history is a list of ``(time, rate)`` change points starting at 0.
    Bins tile ``[0, duration]``; the last one may be shorter.
    """
    nbins = max(1, math.ceil(duration / bin_width - 1e-12))
    edges = [min(k * bin_width, duration) for k in range(nbins + 1)]
    out = []
    for link_id, direction, capacity, history in histories:
        # walk the history once, accumulating per-bin integrals
        acc = [0.0] * nbins
        for k, (ts, rate) in enumerate(history):
            if not rate:
                continue
            te = history[k + 1][0] if k + 1 < len(history) else duration
            ts, te = max(ts, 0.0), min(te, duration)
            if te <= ts:
                continue
            b = min(int(ts // bin_width), nbins - 1)
            while b < nbins and edges[b] < te:
                lo, hi = max(ts, edges[b]), min(te, edges[b + 1])
                if hi > lo:
                    acc[b] += rate * (hi - lo)
                b += 1
        for b in range(nbins):
            width = edges[b + 1] - edges[b]
            util = acc[b] / (capacity * width) if width > 0 else 0.0
            out.append(LinkUsageBin(edges[b], link_id, direction, acc[b], util))
    out.sort(key=lambda u: (u.bin_start, u.link, u.direction))
    return out


def network_histories(net):
    for i, hop in enumerate(net.dlinks):
        yield hop.link, hop.direction, net.dlink_capacity[i], net.dlink_history[i]


def link_usage(sim) -> list[LinkUsageBin]:
    return bin_link_usage(network_histories(sim.net), sim.config.metric_bin, sim.config.duration)


def summarize(records: Iterable[FlowRecord], by: str = "dst") -> list[dict]:
    """Transfer-time statistics per file class and destination.

    Each class with records also gets an ``all`` row over its destinations.
    Groups without records are omitted.
    """
    groups: dict[tuple[str, str], list[float]] = {}
    waits: dict[tuple[str, str], list[float]] = {}
    for r in records:
        for key in ((r.cls, getattr(r, by)), (r.cls, "all")):
            groups.setdefault(key, []).append(r.transfer_time)
            waits.setdefault(key, []).append(r.queue_wait)
    rows = []
    for (cls, dst) in sorted(groups, key=lambda k: (k[0], k[1] == "all", k[1])):
        t = np.asarray(groups[(cls, dst)])
        rows.append({
            "class": cls,
            by: dst,
            "count": int(t.size),
            "mean": float(t.mean()),
            "median": float(np.median(t)),
            "p95": float(np.percentile(t, 95)),
            "mean_wait": float(np.mean(waits[(cls, dst)])),
        })
    return rows


def summary_value(rows: list[dict], cls: str, key: str = "all", field: str = "mean", by: str = "dst") -> float:
    for row in rows:
        if row["class"] == cls and row[by] == key:
            return row[field]
    return math.nan


def fmt(x) -> str:
    """Positional decimal with up to 9 significant digits."""
    if isinstance(x, str):
        return x
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x == 0:
        return "0"
    return np.format_float_positional(x, precision=9, unique=True, fractional=False, trim="-")


def export_csv(rows: Iterable[Sequence], header: Sequence[str], path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise IoFailure(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def write_flows_csv(log: FlowLog, path) -> None:
    rows = ((r.flow_id, r.file_id, r.cls, r.activity, r.src, r.dst, r.bytes,
             r.opened_at, r.started_at, r.completed_at) for r in log.records)
    export_csv(rows, FLOW_HEADER, path)


def write_link_usage_csv(bins: Iterable[LinkUsageBin], path) -> None:
    export_csv(((b.bin_start, b.link, b.direction, b.bytes, b.utilization) for b in bins), LINK_HEADER, path)


def write_backlog_csv(samples, path) -> None:
    export_csv(((s.time, s.direction, s.queued_flows, s.queued_bytes, s.live_flows) for s in samples),
               BACKLOG_HEADER, path)


def mean_utilization(net, direction: str, duration: float) -> float:
    """Fraction of a directed link's capacity used over [0, duration]."""
    for i, hop in enumerate(net.dlinks):
        if hop.direction == direction:
            return net.link_bytes(i, duration) / (net.dlink_capacity[i] * duration)
    raise KeyError(direction)


def activity_completion(sim) -> dict[str, dict]:
    """Per-activity flow totals and the time of the last completion."""
    out: dict[str, dict] = {}
    for r in sim.flow_log.records:
        d = out.setdefault(r.activity, {"flows": 0, "bytes": 0.0, "last_completion": 0.0})
        d["flows"] += 1
        d["bytes"] += r.bytes
        d["last_completion"] = max(d["last_completion"], r.completed_at)
    pending: dict[str, int] = {}
    for f in sim.in_flight():
        pending[f.tags["activity"]] = pending.get(f.tags["activity"], 0) + 1
    for act, n in pending.items():
        out.setdefault(act, {"flows": 0, "bytes": 0.0, "last_completion": 0.0})["pending"] = n
    return out


def write_summary(sim, path, bins: list[LinkUsageBin] | None = None) -> None:
    cfg = sim.config
    bins = link_usage(sim) if bins is None else bins
    lines = [
        f"scenario_digest: {cfg.digest()}",
        f"seed: {cfg.seed}",
        f"duration_s: {fmt(cfg.duration)}",
        f"end_time_s: {fmt(sim.end_time)}",
        f"agent_enabled: {str(cfg.agent_enabled).lower()}",
        f"transatlantic_capacity_Bps: {fmt(cfg.transatlantic_capacity())}",
        f"events_dispatched: {sim.sim.dispatched}",
    ]
    counts: dict[str, int] = {}
    for f in sim.files.values():
        counts[f.cls] = counts.get(f.cls, 0) + 1
    for cls in sorted(counts):
        lines.append(f"files_{cls}: {counts[cls]}")
    lines.append(f"flows_completed: {len(sim.flow_log)}")
    lines.append(f"flows_in_flight: {len(sim.net.flows)}")
    lines.append(f"flows_queued: {len(sim.net.queued_flows())}")
    for act, d in sorted(activity_completion(sim).items()):
        lines.append(
            f"activity {act}: flows={d['flows']} bytes={fmt(d['bytes'])} "
            f"last_completion_s={fmt(d['last_completion'])} pending={d.get('pending', 0)}"
        )
    for run in sim.state.analyses:
        lines.append(
            f"analysis {run.center}: start_s={fmt(run.start)} window_files={len(run.window)} "
            f"fetches={len(run.fetched)} completed_s={fmt(run.end) if run.end is not None else 'unfinished'} "
            f"duration_s={fmt(run.duration) if run.end is not None else 'unfinished'}"
        )
    for row in summarize(sim.flow_log.records):
        lines.append(
            f"transfer {row['class']} {row['dst']}: count={row['count']} mean_s={fmt(row['mean'])} "
            f"median_s={fmt(row['median'])} p95_s={fmt(row['p95'])} mean_wait_s={fmt(row['mean_wait'])}"
        )
    for i, hop in enumerate(sim.net.dlinks):
        lines.append(
            f"link {hop.direction}: bytes={fmt(sim.net.link_bytes(i, cfg.duration))} "
            f"mean_utilization={fmt(mean_utilization(sim.net, hop.direction, cfg.duration))}"
        )
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def write_outputs(sim, out_dir) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    bins = link_usage(sim)
    paths = {name: os.path.join(out_dir, name) for name in ("flows.csv", "link_usage.csv", "backlog.csv", "summary.txt")}
    write_flows_csv(sim.flow_log, paths["flows.csv"])
    write_link_usage_csv(bins, paths["link_usage.csv"])
    write_backlog_csv(sim.backlog, paths["backlog.csv"])
    write_summary(sim, paths["summary.txt"], bins)
    return paths
