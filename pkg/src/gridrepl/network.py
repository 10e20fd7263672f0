"""Flow-level network model.

Transfers are fluid flows whose rates are piecewise constant between flow
open/close instants.  Rates follow a max-min fair share of every directed
link, with each flow additionally capped at ``window_bytes / rtt``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .engine import Event, EventHandle, EventKind, Simulator

UNLIMITED = math.inf


class TopologyError(ValueError):
    pass


class CyclicTopology(TopologyError):
    pass


class DisconnectedTopology(TopologyError):
    pass


class UnknownNode(KeyError):
    pass


class ZeroSizeTransfer(ValueError):
    pass


class StalledNetwork(RuntimeError):
    pass


@dataclass
class CenterNode:
    id: str
    utc_offset_hours: int = 0
    is_agent: bool = False
    is_transit_only: bool = False
    active_outbound: int = 0
    max_concurrent_outbound: float = UNLIMITED


@dataclass(frozen=True)
class Link:
    id: str
    endpoints: tuple[str, str]
    capacity_per_direction: float  # bytes/s
    rtt_contribution_ms: float

    def __post_init__(self):
        if not self.capacity_per_direction > 0:
            raise TopologyError(f"link {self.id}: capacity must be > 0")
        if self.rtt_contribution_ms < 0:
            raise TopologyError(f"link {self.id}: rtt contribution must be >= 0")


@dataclass(frozen=True)
class Hop:
    link: str
    src: str
    dst: str

    @property
    def direction(self) -> str:
        return f"{self.src}->{self.dst}"


Path = tuple[Hop, ...]


@dataclass
class Flow:
    id: int
    src: str
    dst: str
    path: Path
    total_bytes: float
    rtt_ms: float
    opened_at: float
    tags: dict = field(default_factory=dict)
    bytes_done: float = 0.0
    current_rate: float = 0.0
    started_at: float | None = None
    completed_at: float | None = None
    # indices of directed links, see Network.dlinks
    dlinks: tuple[int, ...] = ()
    cap: float = math.inf
    history: list[tuple[float, float]] | None = None

    @property
    def remaining(self) -> float:
        return self.total_bytes - self.bytes_done


def max_min_rates(
    flow_links: Sequence[Sequence[int]],
    caps: Sequence[float],
    capacity: Sequence[float],
) -> list[float]:
    """Progressive filling with per-flow rate caps.

    ``flow_links[f]`` lists the resource indices flow ``f`` crosses,
    ``caps[f]`` its own ceiling and ``capacity[r]`` each resource's size.
    Returns the unique max-min fair allocation.
    """
    n = len(flow_links)
    rates = [0.0] * n
    if n == 0:
        return rates

    # Fast path: nothing is shared enough to bind, every flow runs at its cap.
    load: dict[int, float] = {}
    for f in range(n):
        c = caps[f]
        for r in flow_links[f]:
            load[r] = load.get(r, 0.0) + c
    if all(v <= capacity[r] for r, v in load.items()) and all(math.isfinite(c) for c in caps):
        return list(caps)

    members: dict[int, list[int]] = {}
    for f in range(n):
        for r in flow_links[f]:
            members.setdefault(r, []).append(f)
    residual = {r: float(capacity[r]) for r in members}
    count = {r: len(fs) for r, fs in members.items()}
    active = set(range(n))
    level = 0.0
    while active:
        delta = math.inf
        for r, k in count.items():
            if k:
                share = residual[r] / k
                if share < delta:
                    delta = share
        for f in active:
            head = caps[f] - level
            if head < delta:
                delta = head
        if delta < 0:
            delta = 0.0
        level += delta
        for r, k in count.items():
            if k:
                residual[r] -= delta * k
        frozen = []
        for f in active:
            if caps[f] <= level * (1 + 1e-12):
                frozen.append((f, caps[f]))
        for r, k in count.items():
            if k and residual[r] <= 1e-12 * capacity[r]:
                for f in members[r]:
                    if f in active:
                        frozen.append((f, level))
        if not frozen:  # pragma: no cover - numerical safety net
            for f in active:
                frozen.append((f, level))
        for f, rate in frozen:
            if f not in active:
                continue
            active.discard(f)
            rates[f] = rate
            # a capped flow may sit below the current level; return the slack
            slack = level - rate
            for r in flow_links[f]:
                count[r] -= 1
                if slack:
                    residual[r] += slack
    return rates


class Network:
    """Nodes, full-duplex links, static tree routes and live flows.

    When bound to a :class:`Simulator` the network keeps exactly one pending
    ``FlowCompleted`` event for the earliest finishing flow and reallocates
    rates once per simulated instant in which flows opened or closed.
    """

    def __init__(self, nodes: Iterable[CenterNode], links: Iterable[Link], window_bytes: float = 8e6):
        self.nodes: dict[str, CenterNode] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise TopologyError(f"duplicate node {node.id}")
            self.nodes[node.id] = node
        self.links: dict[str, Link] = {}
        for link in links:
            if link.id in self.links:
                raise TopologyError(f"duplicate link {link.id}")
            for end in link.endpoints:
                if end not in self.nodes:
                    raise UnknownNode(end)
            self.links[link.id] = link
        self.window_bytes = float(window_bytes)

        # directed links: index 2*i is endpoints[0]->endpoints[1], 2*i+1 the reverse
        self.dlinks: list[Hop] = []
        self.dlink_index: dict[tuple[str, str, str], int] = {}
        self.dlink_capacity: list[float] = []
        for link in self.links.values():
            a, b = link.endpoints
            for s, d in ((a, b), (b, a)):
                self.dlink_index[(link.id, s, d)] = len(self.dlinks)
                self.dlinks.append(Hop(link.id, s, d))
                self.dlink_capacity.append(link.capacity_per_direction)
        self._routes = self._build_routes()

        self.flows: dict[int, Flow] = {}  # live flows
        self.queues: dict[str, deque[Flow]] = {n: deque() for n in self.nodes}
        self.completed: list[Flow] = []
        self.dlink_rate = [0.0] * len(self.dlinks)
        self.dlink_history: list[list[tuple[float, float]]] = [[(0.0, 0.0)] for _ in self.dlinks]
        self.record_flow_history = False
        self.on_complete = None  # callable(flow)
        self.on_start = None  # callable(flow)
        self._next_id = 0
        self._clock = 0.0
        self._last_advance = 0.0
        self._dirty = False
        self._reschedule = False
        self._sim: Simulator | None = None
        self._completion: EventHandle | None = None

    # ----------------------------------------------------------------- topology
    def _build_routes(self) -> dict[tuple[str, str], Path]:
        adj: dict[str, list[tuple[str, str]]] = {n: [] for n in self.nodes}
        for link in self.links.values():
            a, b = link.endpoints
            if a == b:
                raise CyclicTopology(f"self-loop on link {link.id}")
            adj[a].append((b, link.id))
            adj[b].append((a, link.id))
        if len(self.links) >= len(self.nodes) and self.nodes:
            raise CyclicTopology(f"{len(self.links)} links over {len(self.nodes)} nodes cannot form a tree")
        routes: dict[tuple[str, str], Path] = {}
        names = sorted(self.nodes)
        for root in names:
            parent: dict[str, tuple[str, str] | None] = {root: None}
            order = [root]
            for u in order:
                for v, lid in adj[u]:
                    if v in parent:
                        if parent[u] is None or parent[u][0] != v:
                            raise CyclicTopology(f"cycle through {u}-{v}")
                        continue
                    parent[v] = (u, lid)
                    order.append(v)
            if len(parent) != len(self.nodes):
                missing = sorted(set(self.nodes) - set(parent))
                raise DisconnectedTopology(f"{root} cannot reach {missing}")
            for dst in names:
                if dst == root:
                    continue
                hops = []
                v = dst
                while parent[v] is not None:
                    u, lid = parent[v]
                    hops.append(Hop(lid, u, v))
                    v = u
                routes[(root, dst)] = tuple(reversed(hops))
        return routes

    def _node(self, node_id: str) -> CenterNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def route(self, src: str, dst: str) -> Path:
        for n in (src, dst):
            if self._node(n).is_transit_only:
                raise UnknownNode(f"{n} is transit-only")
        if src == dst:
            return ()
        return self._routes[(src, dst)]

    def path_rtt(self, src: str, dst: str) -> float:
        """End-to-end RTT in milliseconds along the tree path."""
        self._node(src), self._node(dst)
        if src == dst:
            return 0.0
        return sum(self.links[h.link].rtt_contribution_ms for h in self._routes[(src, dst)])

    def rtt_cap(self, rtt_ms: float) -> float:
        if rtt_ms <= 0:
            return math.inf
        return self.window_bytes / (rtt_ms / 1000.0)

    def dlink_of(self, hop: Hop) -> int:
        return self.dlink_index[(hop.link, hop.src, hop.dst)]

    def find_dlink(self, src: str, dst: str) -> int:
        """Index of the directed link joining two adjacent nodes."""
        for (lid, s, d), i in self.dlink_index.items():
            if s == src and d == dst:
                return i
        raise UnknownNode(f"no link {src}->{dst}")

    def allocated(self, dlink: int) -> float:
        return self.dlink_rate[dlink]

    # --------------------------------------------------------------- lifecycle
    def bind(self, sim: Simulator) -> None:
        self._sim = sim
        sim.on(EventKind.FlowCompleted, self._on_completion_event)
        sim.at_instant_end(self._settle_hook)

    def now(self) -> float:
        return self._sim.now() if self._sim is not None else self._clock

    def set_clock(self, t: float) -> None:
        """Advance the standalone clock (only when not bound to a simulator)."""
        if self._sim is not None:
            raise RuntimeError("clock is owned by the simulator")
        self.advance(t)
        self._clock = t

    def open_flow(self, src: str, dst: str, total_bytes: float, tags: dict | None = None) -> int:
        s, d = self._node(src), self._node(dst)
        if s.is_transit_only or d.is_transit_only:
            raise UnknownNode(f"transit-only node cannot terminate a flow ({src}->{dst})")
        if src == dst:
            raise ValueError("src and dst must differ")
        if not total_bytes > 0:
            raise ZeroSizeTransfer(f"transfer of {total_bytes!r} bytes")
        path = self._routes[(src, dst)]
        rtt = sum(self.links[h.link].rtt_contribution_ms for h in path)
        flow = Flow(
            id=self._next_id,
            src=src,
            dst=dst,
            path=path,
            total_bytes=float(total_bytes),
            rtt_ms=rtt,
            opened_at=self.now(),
            tags=dict(tags or {}),
            dlinks=tuple(self.dlink_of(h) for h in path),
            cap=self.rtt_cap(rtt),
        )
        if self.record_flow_history:
            flow.history = []
        self._next_id += 1
        if s.active_outbound < s.max_concurrent_outbound:
            self._start(flow)
        else:
            self.queues[src].append(flow)
        return flow.id

    def _start(self, flow: Flow) -> None:
        self.advance(self.now())
        flow.started_at = self.now()
        self.nodes[flow.src].active_outbound += 1
        self.flows[flow.id] = flow
        self._mark_dirty()
        if self.on_start is not None:
            self.on_start(flow)

    def _mark_dirty(self) -> None:
        self._dirty = True
        if self._sim is not None:
            self._sim.request_settle()

    def advance(self, t: float) -> None:
        """Integrate every live flow's progress up to time ``t``."""
        dt = t - self._last_advance
        if dt > 0:
            for flow in self.flows.values():
                if flow.current_rate:
                    flow.bytes_done = min(flow.total_bytes, flow.bytes_done + flow.current_rate * dt)
        self._last_advance = max(self._last_advance, t)

    def recompute_rates(self) -> dict[int, float]:
        """Reallocate rates for the live flows at the current time."""
        now = self.now()
        self.advance(now)
        flows = list(self.flows.values())
        rates = max_min_rates([f.dlinks for f in flows], [f.cap for f in flows], self.dlink_capacity)
        agg = [0.0] * len(self.dlinks)
        for flow, rate in zip(flows, rates):
            if flow.history is not None and (not flow.history or flow.history[-1][1] != rate):
                flow.history.append((now, rate))
            flow.current_rate = rate
            for i in flow.dlinks:
                agg[i] += rate
        for i, value in enumerate(agg):
            if value != self.dlink_rate[i]:
                self.dlink_rate[i] = value
                hist = self.dlink_history[i]
                if hist[-1][0] == now:
                    hist[-1] = (now, value)
                else:
                    hist.append((now, value))
        self._dirty = False
        self._reschedule = True
        return {f.id: f.current_rate for f in flows}

    def refresh(self) -> None:
        """Bring rates up to date if flows changed at this instant."""
        if self._dirty:
            self.recompute_rates()

    def next_flow_completion(self) -> tuple[int, float]:
        if not self.flows:
            raise StalledNetwork("no live flows")
        now = self.now()
        best: tuple[float, int] | None = None
        for flow in self.flows.values():
            if flow.current_rate > 0:
                t = now + flow.remaining / flow.current_rate
                if best is None or (t, flow.id) < best:
                    best = (t, flow.id)
        if best is None:
            raise StalledNetwork(f"{len(self.flows)} live flows all at rate 0")
        return best[1], best[0]

    def _settle_hook(self) -> None:
        if self._dirty:
            self.recompute_rates()
        if not self._reschedule:
            return
        self._reschedule = False
        sim = self._sim
        if self._completion is not None:
            sim.cancel(self._completion)
            self._completion = None
        if self.flows:
            fid, t = self.next_flow_completion()
            self._completion = sim.schedule(Event(EventKind.FlowCompleted, fid), max(t, sim.now()))

    def _on_completion_event(self, event: Event) -> None:
        self._completion = None
        self.complete_due(self.now())

    def complete_due(self, t: float) -> list[Flow]:
        """Close every flow whose bytes are exhausted at time ``t``."""
        self.advance(t)
        done = []
        for flow in self.flows.values():
            rate = flow.current_rate
            # remaining time below a nanosecond is rounding in the completion time
            if flow.remaining <= max(1e-9 * flow.total_bytes, rate * 1e-9):
                done.append(flow)
        done.sort(key=lambda f: f.id)
        for flow in done:
            self._close(flow, t)
        if not done:
            self._mark_dirty()
        return done

    def _close(self, flow: Flow, t: float) -> None:
        flow.bytes_done = flow.total_bytes
        flow.completed_at = t
        if flow.history is not None:
            flow.history.append((t, 0.0))
        flow.current_rate = 0.0
        del self.flows[flow.id]
        node = self.nodes[flow.src]
        node.active_outbound -= 1
        self.completed.append(flow)
        self._mark_dirty()
        queue = self.queues[flow.src]
        while queue and node.active_outbound < node.max_concurrent_outbound:
            self._start(queue.popleft())
        if self.on_complete is not None:
            self.on_complete(flow)

    # ------------------------------------------------------------ inspection
    def queued_flows(self) -> list[Flow]:
        out = []
        for q in self.queues.values():
            out.extend(q)
        return out

    def link_bytes(self, dlink: int, t_end: float | None = None) -> float:
        """Bytes carried by a directed link over [0, t_end] from its rate history."""
        t_end = self.now() if t_end is None else t_end
        hist = self.dlink_history[dlink]
        total = 0.0
        for k, (t0, r) in enumerate(hist):
            t1 = hist[k + 1][0] if k + 1 < len(hist) else t_end
            t1 = min(t1, t_end)
            if t1 > t0:
                total += r * (t1 - t0)
        return total


def build_network(topology, window_bytes: float = 8e6, max_concurrent_outbound: float = UNLIMITED,
                  agent_nodes: Iterable[str] = ()) -> Network:
    """Instantiate a :class:`Network` from a topology description.

    ``topology`` has ``nodes`` (objects with ``id``, ``utc_offset``, ``transit``)
    and ``links`` (with ``a``, ``b``, ``capacity``, ``rtt_ms``).
    """
    agents = set(agent_nodes)
    nodes = [
        CenterNode(
            id=n.id,
            utc_offset_hours=n.utc_offset,
            is_agent=n.id in agents,
            is_transit_only=n.transit,
            max_concurrent_outbound=max_concurrent_outbound,
        )
        for n in topology.nodes
    ]
    links = [Link(l.id, (l.a, l.b), l.capacity, l.rtt_ms) for l in topology.links]
    return Network(nodes, links, window_bytes=window_bytes)
