"""The four production activities driven as event handlers.

1. RAW replication: back-to-back recording at T0, one round-robin T1 copy per file.
2. Production: a DST per RAW at T0, distributed to every T1.
3. Re-production: each T1 reprocesses the RAW it holds and distributes new DSTs.
4. Detector Analysis: a center gathers the RAW of a lookback window at local time.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

from . import agent
from .engine import Event, EventKind, Simulator
from .metrics import FlowLog, FlowRecord
from .network import Flow, Network, build_network
from .scenario import T1_CENTERS, DataFile, ScenarioConfig, local_start_time, rng_stream, sample_file_size

log = logging.getLogger(__name__)

ROUND_ROBIN_ORDER = T1_CENTERS


def round_robin_dest(index: int) -> str:
    if index < 0:
        raise ValueError("index must be >= 0")
    return ROUND_ROBIN_ORDER[index % len(ROUND_ROBIN_ORDER)]


@dataclass
class AnalysisRun:
    center: str
    start: float
    lookback_hours: float
    window: list[str] = field(default_factory=list)  # RAW ids in the window
    local_at_start: set[str] = field(default_factory=set)
    pending: deque = field(default_factory=deque)
    fetched: list[str] = field(default_factory=list)  # ids actually transferred
    satisfied_locally: list[str] = field(default_factory=list)
    sources: dict[str, str] = field(default_factory=dict)
    inflight: int = 0
    completed: int = 0
    end: float | None = None

    @property
    def requested(self) -> int:
        return len(self.window) - len(self.local_at_start)

    @property
    def duration(self) -> float | None:
        return None if self.end is None else self.end - self.start


@dataclass
class Reprocessor:
    center: str
    queue: deque = field(default_factory=deque)
    busy: bool = False
    processed: list[str] = field(default_factory=list)


@dataclass
class ActivityState:
    raw_file_index: int = 0
    reproduction_started: bool = False
    reprocessors: dict[str, Reprocessor] = field(default_factory=dict)
    analyses: list[AnalysisRun] = field(default_factory=list)


@dataclass
class BacklogSample:
    time: float
    direction: str
    queued_flows: int
    queued_bytes: float
    live_flows: int


def analysis_start(spec, config: ScenarioConfig) -> float:
    """First local ``spec.local_hour`` whose lookback window lies in simulated time."""
    t = local_start_time(spec.center, spec.local_hour, config.epoch_utc_offset, config.topology)
    lookback = spec.lookback_hours * 3600.0
    if t < lookback:
        t += math.ceil((lookback - t) / 86400.0) * 86400.0
    return t


class GridSimulation:
    """One isolated, deterministic run of a scenario."""

    def __init__(self, config: ScenarioConfig, record_flow_history: bool = False):
        self.config = config
        self.sim = Simulator()
        agents = config.agent_nodes if config.agent_enabled else ()
        self.agent_nodes = tuple(agents)
        self.net: Network = build_network(
            config.topology,
            window_bytes=config.window_bytes,
            max_concurrent_outbound=config.max_concurrent_outbound,
            agent_nodes=agents,
        )
        self.net.record_flow_history = record_flow_history
        self.net.bind(self.sim)
        self.net.on_complete = self._flow_completed
        self.flow_log = FlowLog()
        self.files: dict[str, DataFile] = {}
        self.raw_ids: list[str] = []
        self.state = ActivityState()
        self.plans: dict[str, agent.TransferPlan] = {}
        self.backlog: list[BacklogSample] = []
        self._rng = {name: rng_stream(config.seed, name) for name in ("raw", "production", "reproduction")}
        self._pre_start: dict[str, list[str]] = {c: [] for c in T1_CENTERS}
        self._dst_count = 0
        self._rdst_count = 0
        self._ta_dlinks = self._transatlantic_dlinks()

        on = self.sim.on
        on(EventKind.FileRecorded, self._on_file_recorded)
        on(EventKind.ActivityTick, self._on_tick)
        on(EventKind.ReproductionStart, self._on_reproduction_start)
        on(EventKind.AnalysisStart, self._on_analysis_start)
        on(EventKind.MetricSample, self._on_metric_sample)
        self._bootstrap()

    # ------------------------------------------------------------------ setup
    def _transatlantic_dlinks(self) -> list[int]:
        link = self.net.links[self.config.transatlantic_link]
        a, b = link.endpoints
        return [self.net.dlink_index[(link.id, a, b)], self.net.dlink_index[(link.id, b, a)]]

    def _bootstrap(self) -> None:
        cfg, sim = self.config, self.sim
        acts = cfg.activities
        if acts.raw_replication or acts.production or acts.analysis or acts.reproduction:
            sim.schedule(Event(EventKind.FileRecorded), 0.0)
        if acts.reproduction and cfg.reproduction_start <= cfg.duration:
            sim.schedule(Event(EventKind.ReproductionStart), cfg.reproduction_start)
        if acts.analysis:
            for spec in cfg.analysis_centers:
                t = analysis_start(spec, cfg)
                if t <= cfg.duration:
                    sim.schedule(Event(EventKind.AnalysisStart, spec), t)
        sim.schedule(Event(EventKind.MetricSample), 0.0)

    # --------------------------------------------------------------- activity 1
    def raw_replication_step(self) -> tuple[DataFile, float]:
        cfg = self.config
        now = self.sim.now()
        index = self.state.raw_file_index
        size = sample_file_size(self._rng["raw"], cfg.raw_mean_size, cfg.raw_sd_fraction)
        raw = DataFile(f"RAW-{index:06d}", "RAW", size, now, "T0")
        self.files[raw.id] = raw
        self.raw_ids.append(raw.id)
        self.state.raw_file_index += 1
        if cfg.activities.raw_replication:
            dest = round_robin_dest(index)
            self._send(raw, "T0", dest, "raw_replication")
        return raw, now + size / cfg.raw_rate

    def _on_file_recorded(self, event: Event) -> None:
        raw, next_t = self.raw_replication_step()
        if self.config.activities.production:
            delay = self.config.production_delay
            if delay:
                self.sim.schedule(Event(EventKind.ActivityTick, ("produce", raw.id)), self.sim.now() + delay)
            else:
                self.produce_dst(raw)
        if next_t < self.config.duration:
            self.sim.schedule(Event(EventKind.FileRecorded), next_t)

    # --------------------------------------------------------------- activity 2
    def _dst_size(self, parent: DataFile, stream: str) -> float:
        cfg = self.config
        if cfg.dst_size_mode == "derived":
            return parent.size / cfg.dst_ratio
        return sample_file_size(self._rng[stream], cfg.raw_mean_size / cfg.dst_ratio, cfg.raw_sd_fraction)

    def produce_dst(self, raw: DataFile) -> DataFile:
        dst = DataFile(f"DST-{self._dst_count:06d}", "DST", self._dst_size(raw, "production"),
                       self.sim.now(), "T0", parent=raw.id)
        self._dst_count += 1
        self.files[dst.id] = dst
        self._distribute(dst, [c for c in T1_CENTERS if c != "T0"], "production")
        return dst

    def _distribute(self, file: DataFile, destinations, activity: str) -> agent.TransferPlan:
        plan = agent.distribution_tree(file.origin, destinations, self.agent_nodes, self.net, file.id)
        self.plans[file.id] = plan
        for sender, receiver in plan.forwards_from(file.origin):
            self._send(file, sender, receiver, activity)
        return plan

    # --------------------------------------------------------------- activity 3
    def _on_reproduction_start(self, event: Event) -> None:
        self.state.reproduction_started = True
        for center in T1_CENTERS:
            proc = self.state.reprocessors.setdefault(center, Reprocessor(center))
            proc.queue.extend(self._pre_start[center])
            self._pre_start[center] = []
            self._kick(proc)

    def schedule_reproduction(self, center: str, raw_id: str) -> None:
        """Queue a RAW replica that arrived at ``center`` for reprocessing."""
        if self.files[raw_id].created_at >= self.config.reproduction_start:
            return
        if not self.state.reproduction_started:
            self._pre_start[center].append(raw_id)
            return
        proc = self.state.reprocessors[center]
        proc.queue.append(raw_id)
        self._kick(proc)

    def _kick(self, proc: Reprocessor) -> None:
        if proc.busy or not proc.queue:
            return
        raw = self.files[proc.queue[0]]
        proc.busy = True
        done = self.sim.now() + raw.size / self.config.reproduction_rate
        self.sim.schedule(Event(EventKind.ActivityTick, ("reprocessed", proc.center)), done)

    def _reprocessed(self, center: str) -> None:
        proc = self.state.reprocessors[center]
        raw = self.files[proc.queue.popleft()]
        proc.busy = False
        proc.processed.append(raw.id)
        new = DataFile(f"RDST-{self._rdst_count:06d}", "DST", self._dst_size(raw, "reproduction"),
                       self.sim.now(), center, parent=raw.id)
        self._rdst_count += 1
        self.files[new.id] = new
        others = [n for n in ("T0",) + T1_CENTERS if n != center]
        self._distribute(new, others, "reproduction")
        self._kick(proc)

    # --------------------------------------------------------------- activity 4
    def _on_analysis_start(self, event: Event) -> None:
        spec = event.payload
        self.detector_analysis_run(spec.center, self.sim.now(), spec.lookback_hours)

    def detector_analysis_run(self, center: str, start: float, lookback_hours: float) -> AnalysisRun:
        lo = start - lookback_hours * 3600.0
        run = AnalysisRun(center, start, lookback_hours)
        run.window = [fid for fid in self.raw_ids if lo <= self.files[fid].created_at < start]
        run.local_at_start = {fid for fid in run.window if center in self.files[fid].holders}
        run.pending.extend(fid for fid in run.window if fid not in run.local_at_start)
        self.state.analyses.append(run)
        log.debug("analysis at %s t=%s: %d in window, %d to fetch", center, start, len(run.window), len(run.pending))
        self._pump_analysis(run)
        return run

    def _pump_analysis(self, run: AnalysisRun) -> None:
        exclude = () if self.config.analysis_include_t0 else ("T0",)
        while run.pending and run.inflight < self.config.analysis_max_inflight:
            fid = run.pending.popleft()
            file = self.files[fid]
            if run.center in file.holders:
                run.satisfied_locally.append(fid)
                run.completed += 1
                continue
            src = agent.select_source(file, run.center, self.net, exclude=exclude)
            run.sources[fid] = src
            run.fetched.append(fid)
            run.inflight += 1
            self._send(file, src, run.center, "analysis", run=run)
        if not run.pending and run.inflight == 0 and run.end is None:
            run.end = self.sim.now()

    # -------------------------------------------------------------- transfers
    def _send(self, file: DataFile, src: str, dst: str, activity: str, run: AnalysisRun | None = None) -> int:
        tags = {"file": file.id, "class": file.cls, "activity": activity}
        if run is not None:
            tags["run"] = run
        return self.net.open_flow(src, dst, file.size, tags)

    def _flow_completed(self, flow: Flow) -> None:
        tags = flow.tags
        file = self.files[tags["file"]]
        self.flow_log.record(FlowRecord.from_flow(flow))
        activity = tags["activity"]
        if activity == "raw_replication":
            file.holders.add(flow.dst)
            if self.config.activities.reproduction:
                self.schedule_reproduction(flow.dst, file.id)
        elif activity in ("production", "reproduction"):
            for sender, receiver in agent.on_file_received(flow.dst, file, self.plans[file.id]):
                self._send(file, sender, receiver, activity)
        elif activity == "analysis":
            file.holders.add(flow.dst)
            run = tags["run"]
            run.inflight -= 1
            run.completed += 1
            self._pump_analysis(run)

    def _on_tick(self, event: Event) -> None:
        what, arg = event.payload
        if what == "produce":
            self.produce_dst(self.files[arg])
        elif what == "reprocessed":
            self._reprocessed(arg)

    # ---------------------------------------------------------------- metrics
    def _on_metric_sample(self, event: Event) -> None:
        now = self.sim.now()
        queued = self.net.queued_flows()
        for i in self._ta_dlinks:
            on_link = [f for f in queued if i in f.dlinks]
            live = sum(1 for f in self.net.flows.values() if i in f.dlinks)
            self.backlog.append(BacklogSample(now, self.net.dlinks[i].direction, len(on_link),
                                              sum(f.total_bytes for f in on_link), live))
        nxt = now + self.config.metric_bin
        if nxt <= self.config.duration:
            self.sim.schedule(Event(EventKind.MetricSample), nxt)

    # -------------------------------------------------------------------- run
    def run(self, drain: bool = False) -> "GridSimulation":
        """Simulate up to the configured duration; optionally finish all work."""
        self.sim.run_until(self.config.duration)
        if drain:
            self.sim.run()
        self.end_time = self.sim.now()
        self.net.advance(self.end_time)
        return self

    def backlog_at(self, t: float, direction: str | None = None) -> int:
        direction = direction or self.net.dlinks[self._ta_dlinks[0]].direction
        best = None
        for s in self.backlog:
            if s.direction == direction and s.time <= t:
                best = s
        return 0 if best is None else best.queued_flows

    def in_flight(self) -> list[Flow]:
        return list(self.net.flows.values()) + self.net.queued_flows()
