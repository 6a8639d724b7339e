"""Device layer: link-formation game, myopic best-response dynamics, Nash-network check.

A link (i, j) exists when device i proposed it and device j accepted. Device
payoffs:

* a flow endpoint earns the end-to-end rate of the flows it sources or
  terminates;
* for every other flow it earns its marginal contribution, i.e. the total
  rate of those flows with it present minus the total with it (and its links)
  removed.

A proposal forms a link only if the receiving device strictly gains from it.
Besides single-link moves, a transmitting device may recruit an idle relay j
onto a two-hop detour i -> j -> k; this needs the consent of both j and k.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .netmodel import NetworkInstance, adjacency, link_capacity
from .routing import FlowAssignment, LinkGraph, _max_flow, route_flows

Edge = tuple[int, int]

IMPROVE_TOL = 1e-9  # relative to the instance's total demand
DEFAULT_MAX_ITERATIONS = 1000

_KIND_RANK = {"drop": 0, "revoke": 1, "propose": 2, "recruit": 3}


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DeviceStrategy:
    device: int
    proposed_links: frozenset[int]
    accepted_links: frozenset[int]


@dataclass(frozen=True)
class Move:
    kind: str
    device: int
    target: int
    via: int | None = None

    def apply(self, edges: frozenset[Edge]) -> frozenset[Edge]:
        i, j = self.device, self.target
        if self.kind == "drop":
            return edges - {(i, j)}
        if self.kind == "revoke":
            return edges - {(j, i)}
        if self.kind == "propose":
            return edges | {(i, j)}
        return edges | {(i, j), (j, self.via)}

    @property
    def key(self):
        return (self.target, -1 if self.via is None else self.via, _KIND_RANK[self.kind])

    def __str__(self):
        tail = f"->{self.via}" if self.via is not None else ""
        return f"{self.kind}:{self.device}->{self.target}{tail}"


@dataclass
class GameState:
    edges: frozenset[Edge]
    iteration: int = 0

    @property
    def strategies(self) -> dict[int, DeviceStrategy]:
        out: dict[int, set] = {}
        inc: dict[int, set] = {}
        for i, j in self.edges:
            out.setdefault(i, set()).add(j)
            inc.setdefault(j, set()).add(i)
        return {d: DeviceStrategy(d, frozenset(out.get(d, ())), frozenset(inc.get(d, ())))
                for d in set(out) | set(inc)}


class DeviceGame:
    """Payoff evaluation for one instance under one coalition view.

    Routing results are cached by link set, so repeated evaluation of the same
    tentative graph is free.
    """

    def __init__(self, instance: NetworkInstance, coalition_view: Iterable[Iterable[int]]):
        self.instance = instance
        self.candidates = adjacency(instance, coalition_view)
        self.flows = tuple(sorted(instance.flows, key=lambda f: f.id))
        self.tol = IMPROVE_TOL * max(1.0, sum(f.demand for f in self.flows))
        self._full: dict[Edge, float] = {}
        self._routes: dict[frozenset[Edge], FlowAssignment] = {}
        self._without: dict[tuple[frozenset[Edge], int], FlowAssignment] = {}
        self._reach: dict[frozenset[Edge], tuple] = {}
        self._solo: dict = {}
        self._flow_by_id = {f.id: f for f in self.flows}
        self.endpoint_flows: dict[int, list[int]] = {}
        for f in self.flows:
            self.endpoint_flows.setdefault(f.source, []).append(f.id)
            self.endpoint_flows.setdefault(f.destination, []).append(f.id)

    # -- graph / routing -------------------------------------------------

    def full_capacity(self, i: int, j: int) -> float:
        c = self._full.get((i, j))
        if c is None:
            inst = self.instance
            c = self._full[(i, j)] = link_capacity(inst.device(i), inst.device(j), inst.radio)
        return c

    def capacity_map(self, edges: Iterable[Edge]) -> dict[Edge, float]:
        edges = list(edges)
        if self.instance.band_policy == "full-band":
            return {e: self.full_capacity(*e) for e in edges}
        outdeg: dict[int, int] = {}
        for i, _ in edges:
            outdeg[i] = outdeg.get(i, 0) + 1
        return {(i, j): self.full_capacity(i, j) / outdeg[i] for i, j in edges}

    def graph(self, edges: frozenset[Edge]) -> LinkGraph:
        return LinkGraph(frozenset(self.instance.device_ids), self.capacity_map(edges))

    def route(self, edges: frozenset[Edge]) -> FlowAssignment:
        a = self._routes.get(edges)
        if a is None:
            a = self._routes[edges] = route_flows(self.graph(edges), self.flows, cache=self._solo)
        return a

    def route_without(self, edges: frozenset[Edge], node: int) -> FlowAssignment:
        key = (edges, node)
        a = self._without.get(key)
        if a is None:
            g = self.graph(edges).without_node(node)
            a = self._without[key] = route_flows(g, self.flows, cache=self._solo)
        return a

    def unmet(self, edges: frozenset[Edge]) -> dict[int, float]:
        a = self.route(edges)
        return {f.id: f.demand - a.achieved.get(f.id, 0.0) for f in self.flows
                if a.achieved.get(f.id, 0.0) < f.demand - self.tol}

    def demands_met(self, edges: frozenset[Edge]) -> bool:
        return not self.unmet(edges)

    # -- payoffs -----------------------------------------------------------

    def flow(self, flow_id: int):
        return self._flow_by_id[flow_id]

    def payoff(self, device: int, edges: frozenset[Edge]) -> float:
        a = self.route(edges)
        own = set(self.endpoint_flows.get(device, ()))
        value = math.fsum(a.achieved.get(l, 0.0) for l in own)
        has_in = any(j == device for _, j in edges)
        has_out = any(i == device for i, _ in edges)
        # without both an in- and an out-link no other flow can pass through the
        # device, and absent contention its own flows do not affect the others
        if (has_in and has_out) or (a.contended and (has_in or has_out)):
            b = self.route_without(edges, device)
            others = [f.id for f in self.flows if f.id not in own]
            value += math.fsum(a.achieved.get(l, 0.0) for l in others)
            value -= math.fsum(b.achieved.get(l, 0.0) for l in others)
        return value

    def improves(self, new: float, old: float) -> bool:
        return new > old + self.tol

    def consents(self, device: int, before: frozenset[Edge], after: frozenset[Edge]) -> bool:
        return self.improves(self.payoff(device, after), self.payoff(device, before))

    def agreed(self, move: Move, before: frozenset[Edge], after: frozenset[Edge]) -> bool:
        if move.kind == "propose":
            return self.consents(move.target, before, after)
        if move.kind == "recruit":
            return self.consents(move.target, before, after) and self.consents(move.via, before, after)
        return True

    # -- reachability ------------------------------------------------------

    def reach(self, edges: frozenset[Edge]):
        """Per flow: nodes reachable from its source, and nodes that reach its destination."""
        got = self._reach.get(edges)
        if got is None:
            out: dict[int, list[int]] = {}
            inc: dict[int, list[int]] = {}
            for i, j in edges:
                out.setdefault(i, []).append(j)
                inc.setdefault(j, []).append(i)
            fwd, back = {}, {}
            for f in self.flows:
                fwd[f.id] = _closure(f.source, out)
                back[f.id] = _closure(f.destination, inc)
            got = self._reach[edges] = (fwd, back)
        return got


def _closure(start: int, nbrs: dict[int, list[int]]) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        for v in nbrs.get(stack.pop(), ()):
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def unilateral_moves(device: int, edges: frozenset[Edge], game: DeviceGame) -> list[Move]:
    """Every single-step strategy change: drop a proposal, revoke an acceptance, add a proposal."""
    moves = [Move("drop", device, j) for (i, j) in edges if i == device]
    moves += [Move("revoke", device, p) for (p, j) in edges if j == device]
    have = {j for (i, j) in edges if i == device}
    moves += [Move("propose", device, j) for j in sorted(game.candidates[device] - have)]
    return moves


def _useful_link(i: int, j: int, fwd, back) -> bool:
    return any(i in fwd[l] and j in back[l] for l in fwd)


def _recruit_moves(device: int, edges: frozenset[Edge], game: DeviceGame) -> list[tuple[float, Move]]:
    """Two-hop detours through an idle device for flows this device carries short of demand.

    The onward hop must end at the flow's destination or at a device already
    carrying the flow. Each candidate comes with an upper bound on the gain.
    """
    unmet = game.unmet(edges)
    if not unmet:
        return []
    a = game.route(edges)
    caps = game.capacity_map(edges)
    load = a.edge_load()
    residual = {e: c - load.get(e, 0.0) for e, c in caps.items() if c - load.get(e, 0.0) > 0}

    def extra(u, v, limit):
        if u == v:
            return limit
        out = _max_flow(residual, u, v, limit)
        return math.fsum(r for (x, _), r in out.items() if x == u) - math.fsum(r for (_, y), r in out.items() if y == u)

    # spare[k]: extra traffic that could reach the device and still be forwarded from k
    spare: dict[int, float] = {}
    deficit = 0.0
    for l in sorted(unmet):
        fl = game.flow(l)
        carriers = {fl.source} | {n for (e, fid), r in a.rates.items() if fid == l and r > 0 for n in e}
        if device not in carriers or device == fl.destination:
            continue
        up = extra(fl.source, device, unmet[l])
        if up <= game.tol:
            continue
        deficit += up
        for k in (carriers | {fl.destination}) - {device, fl.source}:
            down = up if k == fl.destination else extra(k, fl.destination, up)
            spare[k] = max(spare.get(k, 0.0), down)
    targets = {k for k, v in spare.items() if v > game.tol}
    if not targets:
        return []
    busy = {n for e in edges for n in e} | set(game.endpoint_flows)
    outdeg: dict[int, int] = {}
    for i, _ in edges:
        outdeg[i] = outdeg.get(i, 0) + 1
    share = 1.0 if game.instance.band_policy == "full-band" else 1.0 / (outdeg.get(device, 0) + 1)
    # traffic the device's existing links can no longer carry once the band is split further
    loss = 0.0
    if share < 1.0:
        d = outdeg.get(device, 0)
        loss = math.fsum(max(0.0, load.get(e, 0.0) - caps[e] * d / (d + 1)) for e in caps if e[0] == device)
    found = []
    for j in sorted(game.candidates[device] - busy):
        c_ij = game.full_capacity(device, j) * share
        for k in sorted(game.candidates[j] & targets):
            gain = min(c_ij, game.full_capacity(j, k), deficit, spare[k]) - loss
            found.append((gain, Move("recruit", device, j, k)))
    return found


def best_move(device: int, edges: frozenset[Edge], game: DeviceGame) -> tuple[Move | None, float, float]:
    """Best strictly improving move of ``device`` (or None), with its old and new payoff.

    Ties go to the lowest target id. Proposals that no flow could use are
    skipped when the current routing has no inter-flow contention; in that
    regime such a link cannot raise anyone's rate.
    """
    current = game.payoff(device, edges)
    contended = game.route(edges).contended
    fwd, back = game.reach(edges)
    scored: list[tuple[float, tuple, Move]] = []
    for mv in unilateral_moves(device, edges, game):
        if mv.kind == "propose" and not contended and not _useful_link(device, mv.target, fwd, back):
            continue
        scored.append((game.payoff(device, mv.apply(edges)), mv.key, mv))
    best_single = max((v for v, _, _ in scored), default=-math.inf)
    recruits = sorted(_recruit_moves(device, edges, game), key=lambda t: (-t[0], t[1].key))
    floor = max(current, best_single)
    for estimate, mv in recruits:
        if current + estimate <= floor + game.tol:
            break
        value = game.payoff(device, mv.apply(edges))
        scored.append((value, mv.key, mv))
        floor = max(floor, value)
    improving = [s for s in scored if game.improves(s[0], current)]
    improving.sort(key=lambda s: (-s[0], s[1]))
    for value, _, mv in improving:
        # candidates within tolerance of the best count as tied; lowest key wins among them
        after = mv.apply(edges)
        if game.agreed(mv, edges, after):
            return mv, current, value
    return None, current, current


def best_response(device: int, state: GameState, instance: NetworkInstance,
                  coalition_view: Iterable[Iterable[int]] | None = None,
                  game: DeviceGame | None = None) -> DeviceStrategy:
    """Strategy of ``device`` after its best response to the others' current strategies."""
    if game is None:
        view = coalition_view if coalition_view is not None else [instance.operator_ids]
        game = DeviceGame(instance, view)
    mv, _, _ = best_move(device, state.edges, game)
    edges = mv.apply(state.edges) if mv else state.edges
    strat = GameState(edges).strategies.get(device)
    return strat or DeviceStrategy(device, frozenset(), frozenset())


@dataclass
class CGGResult:
    state: GameState
    iterations: int
    seed: int
    trace: list[tuple[int, int, float, float, str]]
    game: DeviceGame

    @property
    def assignment(self) -> FlowAssignment:
        return self.game.route(self.state.edges)


def initial_edges(instance: NetworkInstance) -> frozenset[Edge]:
    return frozenset((f.source, f.destination) for f in instance.flows)


def run_cgg(instance: NetworkInstance, coalition_view: Iterable[Iterable[int]], rng_seed: int,
            max_iterations: int = DEFAULT_MAX_ITERATIONS, game: DeviceGame | None = None) -> CGGResult:
    """Myopic best-response dynamics from direct source-destination links.

    Each iteration visits all devices in a fresh seeded random order; idle
    devices (no links, no flows) cannot gain by any unilateral move and pass.
    Stops after an iteration with no change or once every demand is met.
    """
    game = game or DeviceGame(instance, coalition_view)
    rng = random.Random(rng_seed)
    start = initial_edges(instance)
    edges = start
    devices = sorted(instance.device_ids)
    trace = []
    iteration = 1
    if game.demands_met(edges):
        return CGGResult(GameState(edges, iteration), iteration, rng_seed, trace, game)
    while True:
        if iteration > max_iterations:
            raise ConvergenceError(f"no convergence within {max_iterations} iterations (seed {rng_seed})")
        changed = False
        for i in rng.sample(devices, len(devices)):
            if i not in game.endpoint_flows and not any(i in e for e in edges):
                continue
            mv, old, new = best_move(i, edges, game)
            if mv is not None:
                edges = mv.apply(edges)
                changed = True
                trace.append((iteration, i, old, new, str(mv)))
        for e in prunable_edges(edges, start, game):
            edges = edges - {e}
            changed = True
            trace.append((iteration, e[0], math.nan, math.nan, f"prune:{e[0]}->{e[1]}"))
        if not changed or game.demands_met(edges):
            break
        iteration += 1
    return CGGResult(GameState(edges, iteration), iteration, rng_seed, trace, game)


def prunable_edges(edges: frozenset[Edge], keep: frozenset[Edge], game: DeviceGame) -> list[Edge]:
    """Idle links whose removal changes no payoff, excluding the initial direct links.

    Checked one at a time, each on the graph left by the removals before it.
    """
    load = game.route(edges).edge_load()
    found = []
    for e in sorted(edges - keep):
        if load.get(e, 0.0) > game.tol:
            continue
        after = edges - {e}
        if all(abs(game.payoff(i, after) - game.payoff(i, edges)) <= game.tol for i in game.instance.device_ids):
            found.append(e)
            edges = after
    return found


def verify_nash(state: GameState, instance: NetworkInstance,
                coalition_view: Iterable[Iterable[int]] | None = None,
                game: DeviceGame | None = None) -> tuple[bool, tuple[int, Move, float, float] | None]:
    """Exhaustively look for a unilateral strictly improving deviation.

    Returns ``(True, None)`` for a Nash network, else ``(False, (device, move,
    old payoff, new payoff))``.
    """
    if game is None:
        view = coalition_view if coalition_view is not None else [instance.operator_ids]
        game = DeviceGame(instance, view)
    edges = state.edges
    for i in sorted(instance.device_ids):
        current = game.payoff(i, edges)
        for mv in unilateral_moves(i, edges, game):
            after = mv.apply(edges)
            value = game.payoff(i, after)
            if game.improves(value, current) and game.agreed(mv, edges, after):
                return False, (i, mv, current, value)
    return True, None


TRACE_COLUMNS = ("iteration", "device", "old_payoff", "new_payoff", "move")


def write_trace_csv(trace: Sequence[tuple], fh) -> None:
    w = csv.writer(fh)
    w.writerow(TRACE_COLUMNS)
    w.writerows(trace)
