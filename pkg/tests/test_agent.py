import dataclasses
import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridrepl.agent import (
    Mode,
    NoHolder,
    distribution_tree,
    estimate_transfer_rate,
    on_file_received,
    score_sources,
    select_source,
)
from gridrepl.network import build_network
from gridrepl.scenario import T1_CENTERS, DataFile, default_topology

AGENTS = ("T0", "T1-US1")
ALL = ("T0",) + T1_CENTERS


def link_copies(plan, net):
    counts = {}
    for s, d in plan.edges:
        for hop in net.route(s, d):
            counts[hop.direction] = counts.get(hop.direction, 0) + 1
    return counts


def test_t0_rooted_agent_tree(paper_net):
    plan = distribution_tree("T0", T1_CENTERS, AGENTS, paper_net)
    assert plan.mode is Mode.AGENT
    assert set(plan.edges) == {("T0", "T1-EU1"), ("T0", "T1-EU2"), ("T0", "T1-EU3"),
                               ("T0", "T1-US1"), ("T1-US1", "T1-US2"), ("T1-US1", "T1-JP")}
    assert link_copies(plan, paper_net)["T0->T1-US1"] == 1


def test_t0_rooted_direct_tree(paper_net):
    plan = distribution_tree("T0", T1_CENTERS, (), paper_net)
    assert plan.mode is Mode.DIRECT
    assert set(plan.edges) == {("T0", d) for d in T1_CENTERS}
    assert link_copies(plan, paper_net)["T0->T1-US1"] == 3


def test_eu_rooted_agent_tree(paper_net):
    others = [c for c in ALL if c != "T1-EU1"]
    plan = distribution_tree("T1-EU1", others, AGENTS, paper_net)
    assert set(plan.edges) == {("T1-EU1", "T1-EU2"), ("T1-EU1", "T1-EU3"), ("T1-EU1", "T0"),
                               ("T0", "T1-US1"), ("T1-US1", "T1-US2"), ("T1-US1", "T1-JP")}
    assert link_copies(plan, paper_net)["T0->T1-US1"] == 1


def test_forwarding(paper_net):
    plan = distribution_tree("T0", T1_CENTERS, AGENTS, paper_net, "DST-1")
    f = DataFile("DST-1", "DST", 2e8, 0.0, "T0")
    assert set(on_file_received("T1-US1", f, plan)) == {("T1-US1", "T1-US2"), ("T1-US1", "T1-JP")}
    assert on_file_received("T1-EU2", f, plan) == []
    assert f.holders == {"T0", "T1-US1", "T1-EU2"}
    direct = distribution_tree("T0", T1_CENTERS, (), paper_net)
    assert on_file_received("T1-US1", f, direct) == []


@given(st.sampled_from(ALL), st.sets(st.sampled_from(ALL), min_size=1), st.sets(st.sampled_from(ALL)))
def test_agent_plan_properties(root, dests, agents):
    net = build_network(default_topology())
    dests = sorted(dests - {root})
    if not dests:
        return
    plan = distribution_tree(root, dests, agents, net)
    # every destination fed once, and reachable from the root
    assert sorted(d for _, d in plan.edges) == dests
    holders = {root}
    pending = list(plan.edges)
    while pending:
        ready = [e for e in pending if e[0] in holders]
        assert ready, "plan is not a tree rooted at the origin"
        for e in ready:
            holders.add(e[1])
            pending.remove(e)
    if plan.mode is Mode.AGENT:
        # a link whose head relays carries the file once; fan-out only happens
        # in front of nodes that cannot relay (transit router, non-agents)
        relays = (set(agents) & set(dests)) | {root}
        for direction, n in link_copies(plan, net).items():
            head = direction.split("->")[1]
            if head in relays:
                assert n == 1, direction


def test_estimate_rate_idle(paper_net):
    assert estimate_transfer_rate("T0", "T1-JP", paper_net) == pytest.approx(8e6 / 0.36)
    assert estimate_transfer_rate("T0", "T1-JP", paper_net) == pytest.approx(2.222e7, rel=1e-3)
    assert estimate_transfer_rate("T1-US2", "T1-JP", paper_net) == pytest.approx(2.667e7, rel=1e-3)


def test_estimate_rate_saturated():
    net = build_network(default_topology(transatlantic_gbps=0.1), window_bytes=1e12)
    for _ in range(3):
        net.open_flow("T0", "T1-US1", 1e12)
    net.recompute_rates()
    assert estimate_transfer_rate("T0", "T1-JP", net) == pytest.approx(1.0)


def test_select_single_holder(paper_net):
    f = DataFile("RAW-1", "RAW", 2e9, 0.0, "T0")
    assert select_source(f, "T1-JP", paper_net) == "T0"
    assert select_source(f, "T0", paper_net) == "T0"


def test_select_prefers_unloaded_closer_holder(paper_net):
    paper_net.nodes["T0"].active_outbound = 5
    f = DataFile("RAW-1", "RAW", 2e9, 0.0, "T0", holders={"T1-US2"})
    scores = {s.candidate: s for s in score_sources(f.size, f.holders, "T1-JP", paper_net)}
    # 2.667e7/(1+0) vs 2.222e7/(1+5)
    assert scores["T1-US2"].est_completion == pytest.approx(2e9 / 2.6666667e7, rel=1e-6)
    assert scores["T0"].est_completion == pytest.approx(2e9 / (2.2222222e7 / 6), rel=1e-6)
    assert select_source(f, "T1-JP", paper_net) == "T1-US2"


def test_select_closer_at_equal_load(paper_net):
    f = DataFile("RAW-1", "RAW", 2e9, 0.0, "T0", holders={"T1-US2"})
    assert select_source(f, "T1-JP", paper_net) == "T1-US2"  # 300 ms vs 360 ms


def test_select_no_holder(paper_net):
    f = DataFile("RAW-1", "RAW", 2e9, 0.0, "T0")
    with pytest.raises(NoHolder):
        select_source(f, "T1-JP", paper_net, exclude=("T0",))


@pytest.mark.parametrize("scale", [2.0, 7.5, 0.5])
def test_selection_invariant_under_capacity_scaling(scale):
    # a huge window keeps every RTT cap inactive, so rates scale with capacity
    topo = default_topology(transatlantic_gbps=2.5)
    scaled = dataclasses.replace(topo, links=tuple(dataclasses.replace(l, capacity=l.capacity * scale)
                                                    for l in topo.links))
    picks = []
    for t in (topo, scaled):
        net = build_network(t, window_bytes=1e15)
        for src, dst in (("T0", "T1-US1"), ("T0", "T1-US1"), ("T1-EU1", "T1-EU2")):
            net.open_flow(src, dst, 1e12)
        net.recompute_rates()
        choice = []
        for holders in itertools.combinations(("T0", "T1-EU1", "T1-EU3", "T1-US2"), 2):
            f = DataFile("R", "RAW", 2e9, 0.0, holders[0], holders=set(holders))
            choice.append(select_source(f, "T1-JP", net))
        picks.append(choice)
    assert picks[0] == picks[1]
