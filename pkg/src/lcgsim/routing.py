"""Multi-path flow routing on a link graph, plus device payoffs derived from it.

All rates are in bit/s. A flow session may be split over any number of paths;
the router maximizes the total achieved rate with each flow capped at its
demand.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .netmodel import FlowSession

Edge = tuple[int, int]

AUDIT_SLACK = 1e-9

# process-wide tally of audits, read by the test suite
audit_stats: Counter = Counter()


class RoutingError(ValueError):
    pass


class FeasibilityError(AssertionError):
    """A flow assignment violates conservation, capacity or demand constraints."""


@dataclass(frozen=True)
class LinkGraph:
    nodes: frozenset[int]
    capacities: Mapping[Edge, float]

    def __post_init__(self):
        object.__setattr__(self, "nodes", frozenset(self.nodes))
        for (i, j), c in self.capacities.items():
            if i == j:
                raise RoutingError(f"self-loop at {i}")
            if i not in self.nodes or j not in self.nodes:
                raise RoutingError(f"edge {(i, j)} has an endpoint outside the graph")
            if c < 0:
                raise RoutingError(f"negative capacity on {(i, j)}")

    @classmethod
    def from_edges(cls, edges: Mapping[Edge, float], nodes: Iterable[int] = ()) -> "LinkGraph":
        ns = set(nodes)
        for i, j in edges:
            ns.update((i, j))
        return cls(frozenset(ns), dict(edges))

    @property
    def edges(self) -> list[Edge]:
        return sorted(self.capacities)

    def without_node(self, node: int) -> "LinkGraph":
        caps = {e: c for e, c in self.capacities.items() if node not in e}
        return LinkGraph(self.nodes - {node}, caps)

    def with_edges(self, extra: Mapping[Edge, float]) -> "LinkGraph":
        caps = dict(self.capacities)
        caps.update(extra)
        return LinkGraph.from_edges(caps, self.nodes)


@dataclass
class FlowAssignment:
    rates: dict[tuple[Edge, int], float] = field(default_factory=dict)
    achieved: dict[int, float] = field(default_factory=dict)
    paths: dict[int, list[tuple[tuple[int, ...], float]]] = field(default_factory=dict)
    contended: bool = False

    @property
    def total(self) -> float:
        return math.fsum(self.achieved.values())

    def edge_load(self) -> dict[Edge, float]:
        load: dict[Edge, list[float]] = {}
        for (e, _), r in self.rates.items():
            load.setdefault(e, []).append(r)
        return {e: math.fsum(v) for e, v in load.items()}

    def flow_nodes(self, flow_id: int) -> set[int]:
        """Devices that transmit a positive rate of ``flow_id``."""
        return {e[0] for (e, l), r in self.rates.items() if l == flow_id and r > 0}

    def to_rows(self) -> list[tuple[int, int, int, float]]:
        return [(i, j, l, r) for ((i, j), l), r in sorted(self.rates.items())]


# --------------------------------------------------------------------------
# single-commodity max flow


def _eps(caps: Mapping[Edge, float]) -> float:
    top = max(caps.values(), default=1.0)
    return 1e-12 * max(top, 1.0)


def _max_flow(caps: Mapping[Edge, float], source: int, sink: int, limit: float) -> dict[Edge, float]:
    """Net per-edge flow of a max flow from source to sink, stopped at ``limit``.

    Shortest augmenting paths; among equal length, the lexicographically
    smallest node sequence is used.
    """
    res: dict[int, dict[int, float]] = {}
    for (u, v), c in caps.items():
        res.setdefault(u, {}).setdefault(v, 0.0)
        res.setdefault(v, {}).setdefault(u, 0.0)
        res[u][v] += c
    if source not in res or sink not in res:
        return {}
    eps = _eps(caps)
    remaining = limit
    while remaining > eps:
        # distances to the sink over residual arcs
        dist = {sink: 0}
        frontier = [sink]
        while frontier and source not in dist:
            nxt = []
            for v in frontier:
                for u in res[v]:
                    if u not in dist and res[u][v] > eps:
                        dist[u] = dist[v] + 1
                        nxt.append(u)
            frontier = nxt
        if source not in dist:
            break
        path = [source]
        u = source
        while u != sink:
            d = dist[u] - 1
            u = min(v for v, r in res[u].items() if r > eps and dist.get(v) == d)
            path.append(u)
        push = min(remaining, min(res[a][b] for a, b in zip(path, path[1:])))
        for a, b in zip(path, path[1:]):
            res[a][b] -= push
            res[b][a] += push
        remaining -= push
    flow = {}
    for (u, v), c in caps.items():
        net = c - res[u][v]
        if net > eps:
            flow[(u, v)] = net
    return flow


def _decompose(flow: Mapping[Edge, float], source: int, sink: int, eps: float) -> list[tuple[tuple[int, ...], float]]:
    """Split an edge flow into simple source-sink paths; leftover circulation is dropped."""
    remaining = {e: f for e, f in flow.items() if f > eps}
    paths = []
    while True:
        out: dict[int, list[int]] = {}
        for (u, v) in remaining:
            out.setdefault(u, []).append(v)
        for vs in out.values():
            vs.sort()
        # depth-first, smallest successor first, no revisits
        stack = [(source, iter(out.get(source, ())))]
        on_path = [source]
        seen = {source}
        found = False
        while stack:
            node, it = stack[-1]
            if node == sink:
                found = True
                break
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                on_path.pop()
                continue
            if nxt in seen:
                continue
            seen.add(nxt)
            stack.append((nxt, iter(out.get(nxt, ()))))
            on_path.append(nxt)
        if not found:
            return paths
        hops = list(zip(on_path, on_path[1:]))
        value = min(remaining[e] for e in hops)
        for e in hops:
            remaining[e] -= value
            if remaining[e] <= eps:
                del remaining[e]
        paths.append((tuple(on_path), value))


def _assemble(path_sets: Mapping[int, list[tuple[tuple[int, ...], float]]], caps: Mapping[Edge, float],
              clip: bool) -> FlowAssignment:
    """Build an assignment from per-flow paths; with ``clip`` each path is trimmed to residual capacity."""
    residual = dict(caps)
    rates: dict[tuple[Edge, int], list[float]] = {}
    achieved = {}
    kept = {}
    for l in sorted(path_sets):
        got = []
        for nodes, value in path_sets[l]:
            hops = list(zip(nodes, nodes[1:]))
            if clip:
                value = min(value, min(residual[e] for e in hops))
            if value <= 0:
                continue
            for e in hops:
                residual[e] -= value
                rates.setdefault((e, l), []).append(value)
            got.append((nodes, value))
        kept[l] = got
        achieved[l] = math.fsum(v for _, v in got)
    return FlowAssignment({k: math.fsum(v) for k, v in rates.items()}, achieved, kept)


def _round_robin_paths(graph: LinkGraph, flows: Sequence[FlowSession]) -> dict[int, list[tuple[tuple[int, ...], float]]]:
    """Joint routing of competing flows by round-robin shortest augmenting paths.

    Flows take turns in ascending id order; on its turn a flow pushes as much
    as it can (up to its remaining demand) along one shortest path of its own
    residual graph, where it may cancel its own earlier flow but only use
    capacity left over by the others.
    """
    caps = graph.capacities
    eps = _eps(caps)
    load = {e: 0.0 for e in caps}
    own: dict[int, dict[Edge, float]] = {fl.id: {} for fl in flows}
    remaining = {fl.id: fl.demand for fl in flows}
    live = [fl for fl in flows]
    budget = 50 * (len(caps) + 1) * max(1, len(flows))
    while live and budget > 0:
        still = []
        for fl in live:
            budget -= 1
            mine = own[fl.id]
            res: dict[int, dict[int, float]] = {}
            for (u, v), c in caps.items():
                res.setdefault(u, {})[v] = res.get(u, {}).get(v, 0.0) + max(0.0, c - load[(u, v)])
                res.setdefault(v, {})[u] = res.get(v, {}).get(u, 0.0) + mine.get((u, v), 0.0)
            path = _shortest_path(res, fl.source, fl.destination, eps)
            if path is None or remaining[fl.id] <= eps:
                continue
            push = min(remaining[fl.id], min(res[a][b] for a, b in zip(path, path[1:])))
            for a, b in zip(path, path[1:]):
                back = min(push, mine.get((b, a), 0.0))
                if back > 0:
                    mine[(b, a)] -= back
                    load[(b, a)] -= back
                if push - back > 0:
                    mine[(a, b)] = mine.get((a, b), 0.0) + (push - back)
                    load[(a, b)] += push - back
            remaining[fl.id] -= push
            still.append(fl)
        live = still
    return {fl.id: _decompose(own[fl.id], fl.source, fl.destination, eps) for fl in flows}


def _shortest_path(res: dict[int, dict[int, float]], source: int, sink: int, eps: float):
    """Lexicographically smallest among the shortest residual paths, or None."""
    if source not in res or sink not in res:
        return None
    dist = {sink: 0}
    frontier = [sink]
    while frontier and source not in dist:
        nxt = []
        for v in frontier:
            for u in res[v]:
                if u not in dist and res[u].get(v, 0.0) > eps:
                    dist[u] = dist[v] + 1
                    nxt.append(u)
        frontier = nxt
    if source not in dist:
        return None
    path = [source]
    u = source
    while u != sink:
        d = dist[u] - 1
        u = min(v for v, r in res[u].items() if r > eps and dist.get(v) == d)
        path.append(u)
    return path


def _useful_subgraph(caps: Mapping[Edge, float], source: int, sink: int) -> dict[Edge, float]:
    """Edges lying on some source-sink path. Max flow never leaves this subgraph."""
    fwd: dict[int, list[int]] = {}
    back: dict[int, list[int]] = {}
    for (u, v), c in caps.items():
        if c > 0:
            fwd.setdefault(u, []).append(v)
            back.setdefault(v, []).append(u)

    def reach(start, adj):
        seen = {start}
        todo = [start]
        while todo:
            for w in adj.get(todo.pop(), ()):
                if w not in seen:
                    seen.add(w)
                    todo.append(w)
        return seen

    a = reach(source, fwd)
    if sink not in a:
        return {}
    b = reach(sink, back)
    return {(u, v): c for (u, v), c in caps.items() if c > 0 and u in a and v in b}


def _solo_paths(caps: Mapping[Edge, float], fl: FlowSession, cache: dict | None):
    sub = _useful_subgraph(caps, fl.source, fl.destination)
    if not sub:
        return []
    key = (fl.source, fl.destination, fl.demand, tuple(sorted(sub.items())))
    if cache is not None and key in cache:
        return cache[key]
    net = _max_flow(sub, fl.source, fl.destination, fl.demand)
    paths = _decompose(net, fl.source, fl.destination, _eps(sub))
    if cache is not None:
        cache[key] = paths
    return paths


def route_flows(graph: LinkGraph, flows: Sequence[FlowSession], audit: bool = True,
                cache: dict | None = None) -> FlowAssignment:
    """Route every flow on ``graph``, maximizing total achieved rate under demand caps.

    Each flow is first routed alone (exact max flow capped at its demand, flows
    in ascending id order). If the per-flow routes fit jointly within link
    capacities the result is optimal. Otherwise the flows compete for shared
    links and are routed together by round-robin augmentation, which is
    feasible and maximal but not guaranteed optimal.

    ``cache`` may be any dict kept across calls; single-flow solutions are
    stored in it keyed by the part of the graph the flow can use.
    """
    flows = sorted(flows, key=lambda f: f.id)
    caps = graph.capacities
    eps = _eps(caps)
    alone = {}
    for fl in flows:
        if fl.source not in graph.nodes or fl.destination not in graph.nodes:
            alone[fl.id] = []
            continue
        alone[fl.id] = _solo_paths(caps, fl, cache)
    assignment = _assemble(alone, caps, clip=False)
    load = assignment.edge_load()
    if any(load[e] > caps[e] * (1 + 1e-12) for e in load):
        live = [fl for fl in flows if alone[fl.id]]
        joint = _round_robin_paths(graph, live)
        joint.update({fl.id: [] for fl in flows if fl.id not in joint})
        assignment = _assemble(joint, caps, clip=True)
        assignment.contended = True
    if audit:
        audit_assignment(graph, flows, assignment, tally="routed")
    return assignment


def audit_assignment(graph: LinkGraph, flows: Sequence[FlowSession], assignment: FlowAssignment,
                     slack: float = AUDIT_SLACK, tally: str = "checked") -> None:
    """Check non-negativity, source/destination balance, conservation, capacity and demand cap.

    ``slack`` is absolute in bit/s. It only widens where double precision cannot
    resolve it: to 64 ulps of the quantity compared (above about 1e6 bit/s).
    Counts go to ``audit_stats[tally]`` and ``audit_stats[tally + "_failed"]``.
    """
    audit_stats[tally] += 1
    try:
        _audit(graph, flows, assignment, slack)
    except FeasibilityError:
        audit_stats[tally + "_failed"] += 1
        raise


def _audit(graph, flows, assignment, slack):
    tol = lambda mag: max(slack, 64 * math.ulp(mag))  # noqa: E731
    caps = graph.capacities
    per_edge: dict[Edge, list[float]] = {}
    balance: dict[tuple[int, int], list[float]] = {}
    for ((u, v), l), r in assignment.rates.items():
        if (u, v) not in caps:
            raise FeasibilityError(f"flow {l} uses missing edge {(u, v)}")
        if r < -tol(r):
            raise FeasibilityError(f"negative rate {r} on {(u, v)} for flow {l}")
        per_edge.setdefault((u, v), []).append(r)
        balance.setdefault((u, l), []).append(r)
        balance.setdefault((v, l), []).append(-r)
    for e, rs in per_edge.items():
        load = math.fsum(rs)
        if load > caps[e] + tol(caps[e]):
            raise FeasibilityError(f"edge {e} carries {load} > capacity {caps[e]}")
    for fl in flows:
        r = assignment.achieved.get(fl.id, 0.0)
        if r < -tol(r) or r > fl.demand + tol(fl.demand):
            raise FeasibilityError(f"flow {fl.id} achieved {r} outside [0, {fl.demand}]")
        touched = {n for (n, l) in balance if l == fl.id}
        for n in touched | {fl.source, fl.destination}:
            net = math.fsum(balance.get((n, fl.id), ()))
            want = r if n == fl.source else -r if n == fl.destination else 0.0
            if abs(net - want) > tol(max(abs(want), max(map(abs, balance.get((n, fl.id), [0.0]))))):
                raise FeasibilityError(f"flow {fl.id} unbalanced at node {n}: net {net}, expected {want}")


def max_flow_oracle(graph: LinkGraph, flow: FlowSession) -> float:
    """Single-commodity max-flow value by depth-first augmenting paths (testing only)."""
    if flow.source not in graph.nodes or flow.destination not in graph.nodes:
        return 0.0
    residual: dict[Edge, float] = {}
    for (u, v), c in graph.capacities.items():
        residual[(u, v)] = residual.get((u, v), 0.0) + c
        residual.setdefault((v, u), 0.0)
    nbrs: dict[int, list[int]] = {}
    for u, v in residual:
        nbrs.setdefault(u, []).append(v)
    tiny = 1e-12 * max([1.0, *graph.capacities.values()])

    def dfs(u, target, bottleneck, visited):
        if u == target:
            return bottleneck
        visited.add(u)
        for v in nbrs.get(u, ()):
            if v not in visited and residual[(u, v)] > tiny:
                got = dfs(v, target, min(bottleneck, residual[(u, v)]), visited)
                if got > 0:
                    residual[(u, v)] -= got
                    residual[(v, u)] += got
                    return got
        return 0.0

    total = 0.0
    while True:
        pushed = dfs(flow.source, flow.destination, math.inf, set())
        if pushed <= 0:
            return total
        total += pushed


def device_payoff(device: int, assignment: FlowAssignment, flows: Iterable[FlowSession]) -> float:
    """End-to-end rate of the flows sourced at ``device``."""
    return math.fsum(assignment.achieved.get(f.id, 0.0) for f in flows if f.source == device)


def relay_payoff(device: int, graph: LinkGraph, flows: Sequence[FlowSession]) -> float:
    """Total achieved rate with ``device`` present minus the total with it removed."""
    if any(device in (f.source, f.destination) for f in flows):
        raise RoutingError(f"device {device} is a flow endpoint; use device_payoff")
    if device not in graph.nodes:
        return 0.0
    with_it = route_flows(graph, flows).total
    without = route_flows(graph.without_node(device), flows).total
    return with_it - without


ASSIGNMENT_COLUMNS = ("src", "dst", "flow", "rate_bps")


def write_assignment_csv(assignment: FlowAssignment, fh) -> None:
    """Write one row per (edge, flow) with a positive rate: src, dst, flow, rate_bps."""
    w = csv.writer(fh)
    w.writerow(ASSIGNMENT_COLUMNS)
    for row in assignment.to_rows():
        w.writerow(row)
