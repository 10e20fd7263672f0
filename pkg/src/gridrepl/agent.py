"""Transfer agents: relay trees for multi-destination copies and source choice."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

from .network import Network, UnknownNode

MIN_RATE = 1.0  # B/s, keeps completion estimates finite on saturated paths


class UnreachableDestination(ValueError):
    pass


class NoHolder(LookupError):
    pass


class Mode(enum.Enum):
    AGENT = "agent"
    DIRECT = "direct"


@dataclass(frozen=True)
class TransferPlan:
    file_id: str
    root: str
    edges: tuple[tuple[str, str], ...]
    mode: Mode

    def forwards_from(self, node: str) -> list[tuple[str, str]]:
        return [e for e in self.edges if e[0] == node]

    def receivers(self) -> set[str]:
        return {d for _, d in self.edges}


def distribution_tree(root: str, destinations: Iterable[str], agent_nodes: Iterable[str],
                      network: Network, file_id: str = "") -> TransferPlan:
    """Plan how one file reaches every destination.

    With agents, each destination is fed by the last node on its tree path
    from ``root`` that will already hold the file: the root itself or an
    agent that is also a destination.  Without agents every destination is
    fed directly by the root.
    """
    dests = list(dict.fromkeys(destinations))
    if root in dests:
        raise ValueError(f"root {root} listed as a destination")
    for d in dests:
        node = network.nodes.get(d)
        if node is None or node.is_transit_only:
            raise UnreachableDestination(d)
    agents = set(agent_nodes)
    if not agents:
        return TransferPlan(file_id, root, tuple((root, d) for d in dests), Mode.DIRECT)
    relays = (agents & set(dests)) | {root}
    edges = []
    for d in dests:
        sender = root
        for hop in network.route(root, d)[:-1]:
            if hop.dst in relays:
                sender = hop.dst
        edges.append((sender, d))
    return TransferPlan(file_id, root, tuple(edges), Mode.AGENT)


def on_file_received(node: str, file, plan: TransferPlan) -> list[tuple[str, str]]:
    """Record the new replica and return the hops ``node`` must now serve."""
    file.holders.add(node)
    return plan.forwards_from(node)


def estimate_transfer_rate(src: str, dst: str, network: Network) -> float:
    """Residual bandwidth along the path, capped by the window/RTT limit."""
    path = network.route(src, dst)
    if not path:
        raise UnknownNode(f"no path {src}->{dst}")
    network.refresh()
    rate = network.rtt_cap(network.path_rtt(src, dst))
    for hop in path:
        i = network.dlink_of(hop)
        rate = min(rate, network.dlink_capacity[i] - network.allocated(i))
    return max(rate, MIN_RATE)


@dataclass(frozen=True)
class SourceScore:
    candidate: str
    est_rate: float
    load: int
    rtt_ms: float
    est_completion: float


def score_sources(size: float, holders: Iterable[str], requester: str, network: Network) -> list[SourceScore]:
    scores = []
    for h in sorted(set(holders) - {requester}):
        rate = estimate_transfer_rate(h, requester, network)
        load = network.nodes[h].active_outbound
        scores.append(SourceScore(h, rate, load, network.path_rtt(h, requester), size / (rate / (1 + load))))
    scores.sort(key=lambda s: (s.est_completion, s.rtt_ms, s.candidate))
    return scores


def select_source(file, requester: str, network: Network, exclude: Iterable[str] = ()) -> str:
    """Holder with the smallest estimated completion time for ``requester``."""
    if requester not in network.nodes:
        raise UnknownNode(requester)
    if requester in file.holders:
        return requester
    holders = set(file.holders) - set(exclude)
    if not holders:
        raise NoHolder(f"no eligible holder of {file.id}")
    return score_sources(file.size, holders, requester, network)[0].candidate
